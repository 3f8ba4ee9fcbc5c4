"""유한 차분 기울기 검증 (중앙 차분)"""

from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import NumericalError, ValidationError
from app.core.tensor import Tape, Tensor, backward, no_grad
from app.utils.logger import get_logger

logger = get_logger(__name__)


def _scalar(value: Tensor) -> float:
    v = value.item()
    if not np.isfinite(v):
        raise NumericalError("유한 차분 평가 중 비유한 함수값")
    return v


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """max |analytic − numeric| / (|numeric| + floor)"""
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + floor)))


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-4,
    floor: float = 1e-12,
) -> float:
    """스칼라 함수 f의 해석적 기울기를 중앙 차분과 비교해 최대 상대 오차를 반환"""
    if eps <= 0:
        raise ValidationError(f"eps는 양수여야 합니다: {eps}")

    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
    _scalar(y)
    analytic = backward(tape, y, [leaf])["leaf_0"].data

    numeric = np.zeros_like(analytic)
    base = x.data.copy()
    with no_grad():
        for i in range(base.size):
            shifted = base.copy()
            shifted.flat[i] += eps
            f_plus = _scalar(f(Tensor(shifted)))
            shifted.flat[i] -= 2 * eps
            f_minus = _scalar(f(Tensor(shifted)))
            numeric.flat[i] = (f_plus - f_minus) / (2 * eps)
    return relative_error(analytic, numeric, floor)


def finite_diff_check_leaves(
    objective: Callable[[], Tensor],
    leaves: Mapping[str, Tensor],
    eps: float = 1e-4,
    floor: float = 1e-12,
    coords: Optional[Mapping[str, Sequence[int]]] = None,
) -> Tuple[float, Dict[str, float]]:
    """클로저가 읽는 leaf 텐서 묶음에 대해 기울기 검증 (leaf.data를 잠시 바꿔 가며 평가)

    coords가 주어지면 leaf별로 해당 평탄 인덱스만 검사한다.
    """
    previous_flags = {name: t.requires_grad for name, t in leaves.items()}
    for t in leaves.values():
        t.requires_grad = True
    with Tape() as tape:
        y = objective()
    _scalar(y)
    grads = backward(tape, y, leaves)

    per_leaf: Dict[str, float] = {}
    with no_grad():
        for name, leaf in leaves.items():
            original = leaf.data
            indices = list(coords[name]) if coords and name in coords else range(original.size)
            analytic = grads[name].data.reshape(-1)[list(indices)]
            numeric = np.zeros_like(analytic)
            for k, i in enumerate(indices):
                shifted = original.copy()
                shifted.flat[i] += eps
                leaf.data = shifted
                f_plus = _scalar(objective())
                shifted = original.copy()
                shifted.flat[i] -= eps
                leaf.data = shifted
                f_minus = _scalar(objective())
                numeric[k] = (f_plus - f_minus) / (2 * eps)
            leaf.data = original
            leaf.requires_grad = previous_flags[name]
            per_leaf[name] = relative_error(analytic, numeric, floor) if len(numeric) else 0.0
    worst = max(per_leaf.values()) if per_leaf else 0.0
    logger.info(f"🧪 [GRAD_CHECK] leaf {len(per_leaf)}개, 최대 상대 오차 {worst:.3e}")
    return worst, per_leaf
