"""이미지 내보내기: PPM(P6), PNG, 미리보기 그리드

이미지 배열은 (3, H, W), 값 범위 [0, 1] 기준이다.
"""

from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.image as mpimg  # noqa: E402
import numpy as np  # noqa: E402

from app.core.errors import ShapeError, ValidationError  # noqa: E402


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3,H,W) [0,1] → (H,W,3) uint8"""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"이미지는 (3,H,W)여야 합니다: {image.shape}")
    scaled = np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0)
    return scaled.astype(np.uint8).transpose(1, 2, 0)


def encode_ppm(image: np.ndarray) -> bytes:
    pixels = to_uint8(image)
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def decode_ppm(blob: bytes) -> np.ndarray:
    """P6 바이트 → (3,H,W) float64 [0,1]"""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError("PPM 헤더가 잘렸습니다")
        tokens.append(blob[start:pos])
    if tokens[0] != b"P6":
        raise ValidationError(f"P6 PPM이 아닙니다: {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValidationError(f"8비트 PPM만 지원합니다: maxval={maxval}")
    pos += 1
    data = np.frombuffer(blob[pos:pos + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValidationError("PPM payload가 잘렸습니다")
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path: Union[str, Path], image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_ppm(image))
    return path


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_png(path: Union[str, Path], image: np.ndarray) -> Path:
    """matplotlib로 PNG 저장 (Software 메타데이터 제거해 바이트 재현)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mpimg.imsave(path, to_uint8(image), format="png", metadata={"Software": None})
    return path


def make_grid(images: Sequence[np.ndarray], ncols: int = 8, pad: int = 1) -> np.ndarray:
    """(3,H,W) 목록 → 하나의 (3, H', W') 그리드 (빈 칸은 흰색)"""
    if not images:
        raise ValidationError("그리드에 넣을 이미지가 없습니다")
    c, h, w = images[0].shape
    ncols = max(1, min(ncols, len(images)))
    nrows = (len(images) + ncols - 1) // ncols
    grid = np.ones((c, nrows * (h + pad) + pad, ncols * (w + pad) + pad), dtype=np.float64)
    for i, img in enumerate(images):
        r, col = divmod(i, ncols)
        y, x = pad + r * (h + pad), pad + col * (w + pad)
        grid[:, y:y + h, x:x + w] = np.clip(img, 0.0, 1.0)
    return grid
