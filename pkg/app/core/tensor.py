"""역방향 자동 미분 테이프와 최소 텐서 연산

- Tensor: numpy 배열 + 테이프 위치
- Tape: 원시 연산 기록 (부모 인덱스가 항상 자식보다 앞선다)
- backward: 테이프를 소비하며 leaf 기울기를 계산
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import (
    Any,
    Callable,
    Dict,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.core.errors import NumericalError, ShapeError, TapeError, ValidationError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_precision = "f32"
_tape_stack: List["Tape"] = []
_no_grad_depth = 0

ROUNDING_MODES = ("exact", "ste", "poly")


# ---------------------------------------------------------------------------
# 정밀도
# ---------------------------------------------------------------------------

def set_precision(name: str) -> None:
    """전역 정밀도 설정 (f32 학습, f64 검증)"""
    global _precision
    if name not in _DTYPES:
        raise ValidationError(f"지원하지 않는 precision: {name} (f32 또는 f64)")
    _precision = name


def get_precision() -> str:
    return _precision


def get_dtype() -> type:
    return _DTYPES[_precision]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """블록 안에서만 정밀도를 바꾼다"""
    previous = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


# ---------------------------------------------------------------------------
# 활성값 계측
# ---------------------------------------------------------------------------

class ActivationMeter:
    """살아 있는 테이프 노드 수와 최댓값 (leaf 제외)"""

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0

    def add(self, count: int = 1) -> None:
        self.live += count
        if self.live > self.peak:
            self.peak = self.live

    def remove(self, count: int) -> None:
        self.live -= count

    def reset_peak(self) -> None:
        self.peak = self.live


activation_meter = ActivationMeter()


# ---------------------------------------------------------------------------
# Tensor / Tape
# ---------------------------------------------------------------------------

class Tensor:
    """테이프에 기록될 수 있는 dense 실수 배열"""

    __slots__ = ("data", "requires_grad", "name", "_node", "_tape")
    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.data: np.ndarray = np.asarray(data, dtype=get_dtype())
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node: Optional[int] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"스칼라가 아닌 텐서: shape={self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{req}{nm})"

    # 연산자
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: Any) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return getitem(self, key)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


@dataclass(slots=True)
class Node:
    """테이프 노드: 원시 연산 하나 또는 leaf"""
    op: str
    parents: Tuple[int, ...]
    vjp: Optional[Callable[..., Tuple[Optional[np.ndarray], ...]]] = None
    leaf: Optional[Tensor] = None
    segment: bool = False


@dataclass(slots=True)
class CheckpointSegment:
    """체크포인트 구간: 노드 범위와 저장된 입력"""
    start: int
    end: int
    saved_inputs: List[np.ndarray] = field(default_factory=list)


class Tape:
    """연산 기록 테이프

    `with Tape() as tape:` 블록 안의 연산만 기록되고, `backward`가 테이프를 소비한다.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.checkpoint_segments: List[CheckpointSegment] = []
        self.consumed = False
        self._leaf_index: Dict[int, int] = {}
        self._recorded = 0

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("이미 소비된 테이프입니다")
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc: Any) -> bool:
        _tape_stack.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def leaves(self) -> List[Tensor]:
        return [self.nodes[i].leaf for i in self._leaf_index.values()]  # type: ignore[misc]

    def parent_index(self, t: Tensor) -> int:
        """입력 텐서의 노드 인덱스 (-1: 상수)"""
        if t._tape is self and t._node is not None:
            return t._node
        if t._tape is not None and not t._tape.consumed:
            raise TapeError(f"다른 테이프에서 생성된 텐서를 사용했습니다: {t!r}")
        if t.requires_grad:
            key = id(t)
            idx = self._leaf_index.get(key)
            if idx is None:
                idx = len(self.nodes)
                self.nodes.append(Node(op="leaf", parents=(), leaf=t))
                self._leaf_index[key] = idx
            return idx
        return -1

    def append(self, node: Node) -> int:
        self.nodes.append(node)
        self._recorded += 1
        activation_meter.add(1)
        return len(self.nodes) - 1

    def release(self) -> None:
        """노드를 해제하고 테이프를 소비 상태로 만든다"""
        activation_meter.remove(self._recorded)
        self._recorded = 0
        self.nodes = []
        self.checkpoint_segments = []
        self._leaf_index = {}
        self.consumed = True


def current_tape() -> Optional[Tape]:
    if _no_grad_depth > 0 or not _tape_stack:
        return None
    return _tape_stack[-1]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """블록 안의 연산은 기록하지 않는다"""
    global _no_grad_depth
    _no_grad_depth += 1
    try:
        yield
    finally:
        _no_grad_depth -= 1


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"[{op}] 연산 결과에 NaN/Inf가 있습니다")


def _record(
    op: str,
    inputs: Sequence[Tensor],
    out: np.ndarray,
    vjp: Callable[..., Tuple[Optional[np.ndarray], ...]],
    segment: bool = False,
) -> Tensor:
    out = np.asarray(out, dtype=get_dtype())
    _check_finite(out, op)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.requires_grad = False
    result.name = None
    result._node = None
    result._tape = None

    tape = current_tape()
    if tape is None:
        return result
    parents = tuple(tape.parent_index(t) for t in inputs)
    if not segment and all(p < 0 for p in parents):
        return result
    result._node = tape.append(Node(op=op, parents=parents, vjp=vjp, segment=segment))
    result._tape = tape
    return result


def _wrap(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# 역전파
# ---------------------------------------------------------------------------

LeafSink = Callable[[Tensor, np.ndarray], None]


def run_backward(
    tape: Tape, seeds: Sequence[Tuple[Tensor, np.ndarray]]
) -> Dict[int, Tuple[Tensor, np.ndarray]]:
    """seed 기울기에서 출발해 테이프를 역순으로 훑고 leaf 기울기를 모은다 (테이프는 소비하지 않음)"""
    grads: List[Optional[np.ndarray]] = [None] * len(tape.nodes)
    leaf_grads: Dict[int, Tuple[Tensor, np.ndarray]] = {}

    def accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in leaf_grads:
            leaf_grads[key] = (t, leaf_grads[key][1] + g)
        else:
            leaf_grads[key] = (t, g)

    for t, g in seeds:
        g = np.asarray(g, dtype=get_dtype())
        if t._tape is tape and t._node is not None:
            prev = grads[t._node]
            grads[t._node] = g if prev is None else prev + g
        elif t.requires_grad:
            accumulate_leaf(t, g)

    for idx in range(len(tape.nodes) - 1, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        grads[idx] = None
        node = tape.nodes[idx]
        if node.leaf is not None:
            accumulate_leaf(node.leaf, g)
            continue
        assert node.vjp is not None
        parent_grads = node.vjp(g, accumulate_leaf) if node.segment else node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if p < 0 or pg is None:
                continue
            _check_finite(pg, f"{node.op}.backward")
            prev = grads[p]
            grads[p] = pg if prev is None else prev + pg
    return leaf_grads


def backward(
    tape: Tape,
    loss: Tensor,
    wrt: Union[Mapping[str, Tensor], Sequence[Tensor], None] = None,
) -> Dict[str, Tensor]:
    """d(loss)/d(leaf) 계산 후 테이프를 소비한다

    wrt에 있지만 loss에 닿지 않은 leaf는 0 텐서로 채운다.
    """
    if tape.consumed:
        raise TapeError("이미 소비된 테이프입니다")
    if loss.size != 1:
        raise ShapeError(f"loss는 스칼라여야 합니다: shape={loss.shape}")
    if loss._tape is not tape or loss._node is None:
        raise TapeError("loss가 이 테이프에 기록되지 않았습니다")

    leaf_grads = run_backward(tape, [(loss, np.ones_like(loss.data))])

    result: Dict[str, Tensor] = {}
    if wrt is None:
        for i, leaf in enumerate(tape.leaves):
            key = leaf.name or f"leaf_{i}"
            entry = leaf_grads.get(id(leaf))
            result[key] = Tensor(entry[1] if entry else np.zeros_like(leaf.data))
    else:
        items = wrt.items() if isinstance(wrt, Mapping) else (
            (t.name or f"leaf_{i}", t) for i, t in enumerate(wrt)
        )
        for key, leaf in items:
            entry = leaf_grads.get(id(leaf))
            result[key] = Tensor(entry[1] if entry else np.zeros_like(leaf.data))
    tape.release()
    return result


def stop_grad(x: Tensor) -> Tensor:
    """순전파는 항등, 역전파 기여는 정확히 0"""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# 원시 연산
# ---------------------------------------------------------------------------

def add(a: Any, b: Any) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Any, b: Any) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Any, b: Any) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a: Any, b: Any) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _record(
        "div", (a, b), ad / bd,
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def neg(a: Any) -> Tensor:
    a = _wrap(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def square(a: Any) -> Tensor:
    return mul(a, a)


def matmul(a: Any, b: Any) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul은 2차원 이상만 지원합니다: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", (a, b), ad @ bd, vjp)


def im2col(x: Tensor) -> Tensor:
    """3x3 / stride 1 / same padding 패치 행렬: (N,C,H,W) -> (N*H*W, C*9)"""
    if x.ndim != 4:
        raise ShapeError(f"im2col 입력은 (N,C,H,W)여야 합니다: {x.shape}")
    n, c, h, w = x.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))  # (N,C,H,W,3,3)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        g6 = g.reshape(n, h, w, c, 3, 3)
        gp = np.zeros((n, c, h + 2, w + 2), dtype=g.dtype)
        for i in range(3):
            for j in range(3):
                gp[:, :, i:i + h, j:j + w] += g6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return (gp[:, :, 1:-1, 1:-1],)

    return _record("im2col", (x,), cols, vjp)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return _record("silu", (x,), xd * s, lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", (x,), y,
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record("log_softmax", (x,), out,
                   lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return _record("reshape", (x,), x.data.reshape(tuple(shape)), lambda g: (g.reshape(original),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inverse),))


def flip(x: Tensor, axis: int) -> Tensor:
    return _record("flip", (x,), np.flip(x.data, axis=axis), lambda g: (np.flip(g, axis=axis),))


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis: Any, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def sum_(x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    return _record("sum", (x,), x.data.sum(axis=axis, keepdims=keepdims),
                   lambda g: (_expand_reduced(g, shape, axis, keepdims),))


def mean(x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))
    return _record("mean", (x,), x.data.mean(axis=axis, keepdims=keepdims),
                   lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,))


def embedding(table: Tensor, index: Any) -> Tensor:
    """행 조회: table[index]"""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValidationError(f"임베딩 인덱스 범위 초과: {idx.tolist()} (행 수 {table.shape[0]})")

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record("embedding", (table,), table.data[idx], vjp)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return _record("clip", (x,), np.clip(x.data, lo, hi), lambda g: (g * mask,))


def round_q(x: Tensor, mode: str = "exact") -> Tensor:
    """양자화 반올림

    - exact: 계단 함수 그대로 (거의 모든 곳에서 미분 0)
    - ste: 순전파 반올림, 역전파 항등
    - poly: round(x) + (x - round(x))^3 다항 근사
    """
    r = np.rint(x.data)
    if mode == "exact":
        return _record("round", (x,), r, lambda g: (None,))
    if mode == "ste":
        return _record("round_ste", (x,), r, lambda g: (g,))
    if mode == "poly":
        d = x.data - r
        return _record("round_poly", (x,), r + d ** 3, lambda g: (g * 3.0 * d * d,))
    raise ValidationError(f"알 수 없는 rounding 모드: {mode} ({', '.join(ROUNDING_MODES)})")


def getitem(x: Tensor, key: Any) -> Tensor:
    shape = x.shape

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        gx = np.zeros(shape, dtype=g.dtype)
        gx[key] += g
        return (gx,)

    return _record("getitem", (x,), x.data[key], vjp)
