"""AdamW (decoupled weight decay) + 전역 노름 클리핑 + 학습률 감쇠"""

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from app.core.errors import NumericalError, ValidationError
from app.core.tensor import Tensor, get_dtype
from app.utils.logger import get_logger

logger = get_logger(__name__)


def lr_multiplier(step: int, decay: bool) -> float:
    """min(10·step^-0.5, 1), step은 1부터"""
    if not decay or step < 1:
        return 1.0
    return min(10.0 * step ** -0.5, 1.0)


def global_norm(grads: Mapping[str, Tensor]) -> float:
    total = 0.0
    for name in sorted(grads):
        g = grads[name].data.astype(np.float64)
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_by_global_norm(grads: Mapping[str, Tensor], max_norm: float) -> Tuple[Dict[str, Tensor], float]:
    """전역 노름이 max_norm을 넘으면 비율을 맞춰 줄인다. (클리핑 결과, 클리핑 전 노름)"""
    if max_norm <= 0:
        raise ValidationError(f"clip_norm은 양수여야 합니다: {max_norm}")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericalError("기울기 노름이 비유한 값입니다")
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: Tensor(v.data * scale) for k, v in grads.items()}, norm


@dataclass
class AdamW:
    """β1=0.9, β2=0.999, bias correction 포함. 파라미터 텐서의 data를 제자리에서 교체한다."""
    lr: float = 4e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    lr_decay: bool = False
    step_count: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr < 0.0:
            raise ValidationError(f"잘못된 학습률: {self.lr}")

    def current_lr(self, step: int) -> float:
        return self.lr * lr_multiplier(step, self.lr_decay)

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, Tensor]) -> Tuple[float, float]:
        """클리핑 후 한 스텝 갱신. (클리핑 전 노름, 사용한 학습률) 반환"""
        clipped, norm = clip_by_global_norm(grads, self.clip_norm)
        self.step_count += 1
        lr = self.current_lr(self.step_count)
        beta1, beta2 = self.betas
        bias1 = 1.0 - beta1 ** self.step_count
        bias2 = 1.0 - beta2 ** self.step_count
        dtype = get_dtype()
        for name in sorted(params):
            p = params[name]
            g = clipped[name].data if name in clipped else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                logger.error(f"❌ [OPTIMIZER] {name} 기울기에 NaN/Inf")
                raise NumericalError(f"비유한 기울기: {name}")
            m = self.exp_avg.get(name, np.zeros_like(p.data))
            v = self.exp_avg_sq.get(name, np.zeros_like(p.data))
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * g * g
            self.exp_avg[name], self.exp_avg_sq[name] = m, v
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            new = p.data - lr * update
            if self.weight_decay > 0:
                new = new - lr * self.weight_decay * p.data
            p.data = np.asarray(new, dtype=dtype)
        return norm, lr
