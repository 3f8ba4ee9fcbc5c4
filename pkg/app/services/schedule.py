"""노이즈 스케줄 (α_t, σ_t), forward diffusion, 샘플러 서브 그리드"""

import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from app.core.errors import CheckpointFormatError, ShapeError, ValidationError
from app.core.tensor import Tensor

COSINE_OFFSET = 0.008
ALPHA_MIN = 1e-2


@dataclass(frozen=True)
class NoiseSchedule:
    """이산 신호/노이즈 계수와 샘플러 그리드 (생성 후 불변)"""
    n_train: int
    alphas: np.ndarray
    sigmas: np.ndarray
    sampler_grid: np.ndarray

    @property
    def sampler_steps(self) -> int:
        return len(self.sampler_grid) - 1

    def alpha(self, t: int) -> float:
        return float(self.alphas[t])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[t])

    def step_indices(self, k: int) -> Tuple[int, int]:
        """샘플러 스텝 k가 쓰는 스케줄 인덱스 (t, t-1)"""
        if not 1 <= k <= self.sampler_steps:
            raise ValidationError(f"샘플러 스텝 범위 초과: k={k}, S={self.sampler_steps}")
        return int(self.sampler_grid[k]), int(self.sampler_grid[k - 1])

    def is_on_grid(self, t: int) -> bool:
        return bool(np.any(self.sampler_grid == t))

    def to_meta(self) -> Dict[str, Any]:
        """체크포인트 헤더에 넣을 재현 정보"""
        return {
            "n_train": self.n_train,
            "sampler_steps": self.sampler_steps,
            "cosine_offset": COSINE_OFFSET,
            "alpha_min": ALPHA_MIN,
        }


def make_schedule(n_train: int = 1000, sampler_steps: int = 50) -> NoiseSchedule:
    """코사인 신호 스케줄

    α_t = α_min + (1 − α_min)·cos(((t/n)+s)/(1+s)·π/2) / cos(s/(1+s)·π/2), s = 0.008.
    하한 α_min은 아핀 바닥으로 적용해 α가 끝까지 엄격히 감소한다 (α_0 = 1, α_n = α_min).
    """
    if n_train < 1:
        raise ValidationError(f"n_train은 1 이상이어야 합니다: {n_train}")
    if not 1 <= sampler_steps <= n_train:
        raise ValidationError(f"샘플러 스텝 S는 1..n_train 범위여야 합니다: S={sampler_steps}, n_train={n_train}")

    t = np.arange(n_train + 1, dtype=np.float64)
    s = COSINE_OFFSET
    raw = np.cos(((t / n_train) + s) / (1 + s) * math.pi / 2)
    shape = np.clip(raw / raw[0], 0.0, 1.0)
    shape[-1] = 0.0
    alphas = ALPHA_MIN + (1.0 - ALPHA_MIN) * shape
    alphas[0] = 1.0
    alphas[-1] = ALPHA_MIN
    sigmas = np.sqrt(1.0 - alphas ** 2)

    grid = np.round(np.linspace(0, n_train, sampler_steps + 1)).astype(np.int64)
    return NoiseSchedule(n_train=n_train, alphas=alphas, sigmas=sigmas, sampler_grid=grid)


def schedule_from_meta(meta: Dict[str, Any], sampler_steps: Optional[int] = None) -> NoiseSchedule:
    """체크포인트 헤더의 스케줄을 다시 만든다 (sampler_steps를 주면 그리드만 바꾼다)

    학습 때와 다른 cosine 상수로 저장된 체크포인트는 거부한다.
    """
    try:
        n_train = int(meta["n_train"])
        steps = int(meta["sampler_steps"]) if sampler_steps is None else sampler_steps
        constants = (float(meta.get("cosine_offset", COSINE_OFFSET)), float(meta.get("alpha_min", ALPHA_MIN)))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"스케줄 메타가 올바르지 않습니다: {meta}") from e
    if constants != (COSINE_OFFSET, ALPHA_MIN):
        raise CheckpointFormatError(f"지원하지 않는 스케줄 상수입니다: offset={constants[0]}, alpha_min={constants[1]}")
    return make_schedule(n_train, steps)


def forward_noise(schedule: NoiseSchedule, x0: Tensor, t: int, eps: Tensor) -> Tensor:
    """α_t·x0 + σ_t·eps"""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0와 eps의 shape이 다릅니다: {x0.shape} vs {eps.shape}")
    if not 0 <= t <= schedule.n_train:
        raise ValidationError(f"t 범위 초과: {t}")
    return schedule.alpha(t) * x0 + schedule.sigma(t) * eps
