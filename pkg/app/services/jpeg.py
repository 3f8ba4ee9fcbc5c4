"""미분 가능한 JPEG 왕복 (DCT → 양자화 → 역양자화 → 역DCT)

- RGB → YCbCr (표준 JPEG 행렬), chroma subsampling 없음
- 8×8 블록 직교 DCT, 품질 q로 스케일한 표준 휘도/색차 양자화 테이블
- DC 계수는 양자화하지 않는다 (블록 평균만 있는 이미지는 정확히 복원)
- 엔트로피 코딩은 복원값에 영향이 없으므로 생략
"""

import math
from functools import lru_cache
from typing import Tuple

import numpy as np

from app.core.errors import ShapeError, ValidationError
from app.core.tensor import Tensor, clip, matmul, reshape, round_q, transpose

BLOCK = 8

_QT_Y = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

_QT_C = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)

# 전체 범위 BT.601 (JFIF)
_RGB_TO_YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCC_OFFSET = np.array([0.0, 128.0, 128.0])


@lru_cache(maxsize=1)
def dct_matrix() -> np.ndarray:
    """8점 직교 DCT-II 행렬 D (계수 = D·블록·Dᵀ)"""
    d = np.zeros((BLOCK, BLOCK))
    for u in range(BLOCK):
        scale = math.sqrt(1.0 / BLOCK) if u == 0 else math.sqrt(2.0 / BLOCK)
        for x in range(BLOCK):
            d[u, x] = scale * math.cos((2 * x + 1) * u * math.pi / (2 * BLOCK))
    return d


def quality_scale(quality: int) -> float:
    """IJG 품질 → 테이블 배율(%)"""
    if not 1 <= quality <= 100:
        raise ValidationError(f"JPEG 품질은 1..100 범위여야 합니다: {quality}")
    return 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality


@lru_cache(maxsize=16)
def quant_tables(quality: int) -> Tuple[np.ndarray, np.ndarray]:
    scale = quality_scale(quality)
    y = np.clip(np.floor((_QT_Y * scale + 50.0) / 100.0), 1.0, 255.0)
    c = np.clip(np.floor((_QT_C * scale + 50.0) / 100.0), 1.0, 255.0)
    return y, c


def _to_blocks(x: Tensor) -> Tensor:
    """(3,H,W) → (3·H/8·W/8, 8, 8)"""
    c, h, w = x.shape
    b = reshape(x, (c, h // BLOCK, BLOCK, w // BLOCK, BLOCK))
    b = transpose(b, (0, 1, 3, 2, 4))
    return reshape(b, (c * (h // BLOCK) * (w // BLOCK), BLOCK, BLOCK))


def _from_blocks(b: Tensor, shape: Tuple[int, int, int]) -> Tensor:
    c, h, w = shape
    x = reshape(b, (c, h // BLOCK, w // BLOCK, BLOCK, BLOCK))
    x = transpose(x, (0, 1, 3, 2, 4))
    return reshape(x, (c, h, w))


def jpeg_roundtrip(x: Tensor, quality: int = 50, rounding: str = "exact") -> Tuple[Tensor, Tensor]:
    """d(c(x)). 입력 (3,H,W) [0,1] → (클램프된 입력, 복원 이미지) 둘 다 [0,1] 스케일"""
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"JPEG 입력은 (3,H,W)여야 합니다: {x.shape}")
    _, h, w = x.shape
    if h % BLOCK or w % BLOCK:
        raise ShapeError(f"이미지 크기는 8의 배수여야 합니다: {h}×{w}")

    xc = clip(x, 0.0, 1.0)
    pixels = reshape(xc * 255.0, (3, h * w))
    ycc = matmul(Tensor(_RGB_TO_YCC), pixels) + Tensor((_YCC_OFFSET - 128.0)[:, None])
    blocks = _to_blocks(reshape(ycc, (3, h, w)))

    d = Tensor(dct_matrix())
    coef = matmul(matmul(d, blocks), transpose(d))

    qt_y, qt_c = quant_tables(quality)
    per_block = (h // BLOCK) * (w // BLOCK)
    table = np.concatenate([
        np.broadcast_to(qt_y, (per_block, BLOCK, BLOCK)),
        np.broadcast_to(qt_c, (2 * per_block, BLOCK, BLOCK)),
    ])
    dc_mask = np.zeros((BLOCK, BLOCK))
    dc_mask[0, 0] = 1.0
    ac_mask = 1.0 - dc_mask

    quantized = round_q(coef / Tensor(table), rounding) * Tensor(table * ac_mask)
    recon_coef = coef * Tensor(dc_mask) + quantized

    recon_blocks = matmul(matmul(transpose(d), recon_coef), d)
    recon_ycc = reshape(_from_blocks(recon_blocks, (3, h, w)), (3, h * w))
    inv = Tensor(np.linalg.inv(_RGB_TO_YCC))
    rgb = matmul(inv, recon_ycc - Tensor((_YCC_OFFSET - 128.0)[:, None]))
    return xc, reshape(rgb, (3, h, w)) * (1.0 / 255.0)


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """피크 신호 대 잡음비 (dB), 동일 이미지는 inf"""
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)
