"""구간 체크포인팅

구간 입력만 저장하고, 역전파 때 구간 내부를 다시 계산해 기울기를 누적한다.
샘플링 한 스텝이 한 구간이므로 샘플링 중 활성값은 denoiser 호출 한 번 분량 + 스텝별 latent뿐이다.
"""

from typing import Callable, List, Tuple, Union

import numpy as np

from app.core.errors import NondeterministicSegmentError
from app.core.tensor import (
    CheckpointSegment,
    LeafSink,
    Tape,
    Tensor,
    _record,
    current_tape,
    getitem,
    reshape,
    run_backward,
)
from app.utils.logger import get_logger

logger = get_logger(__name__)

_debug_replay = False

SegmentFn = Callable[..., Union[Tensor, Tuple[Tensor, ...]]]


def set_debug_replay(enabled: bool) -> None:
    """재실행 결과를 기록된 출력과 비트 단위로 비교할지 설정"""
    global _debug_replay
    _debug_replay = bool(enabled)


def _as_tuple(out: Union[Tensor, Tuple[Tensor, ...]]) -> Tuple[Tensor, ...]:
    return out if isinstance(out, tuple) else (out,)


def checkpoint_segment(fn: SegmentFn, *inputs: Tensor) -> Union[Tensor, Tuple[Tensor, ...]]:
    """fn(*inputs)를 체크포인트 구간으로 실행

    fn은 입력이 같으면 같은 결과를 내야 한다 (난수는 명시적 입력으로 전달).
    """
    outer = current_tape()
    if outer is None:
        return fn(*inputs)

    first_inputs = [Tensor(x.data, requires_grad=True) for x in inputs]
    with Tape() as first:
        raw = fn(*first_inputs)
    single = isinstance(raw, Tensor)
    outs = _as_tuple(raw)
    input_ids = {id(t) for t in first_inputs}
    touched_params = [leaf for leaf in first.leaves if id(leaf) not in input_ids]
    recorded = [o.data for o in outs]
    first.release()

    tracked_inputs = [x for x in inputs if x.requires_grad or (x._tape is outer and x._node is not None)]
    if not tracked_inputs and not touched_params:
        results = tuple(Tensor(d) for d in recorded)
        return results[0] if single else results

    saved = [x.data for x in inputs]
    shapes = [d.shape for d in recorded]
    sizes = [int(d.size) for d in recorded]
    expected = [d.copy() for d in recorded] if _debug_replay else None
    packed = np.concatenate([d.reshape(-1) for d in recorded])

    def vjp(g: np.ndarray, sink: LeafSink) -> Tuple[np.ndarray, ...]:
        replay_inputs = [Tensor(d, requires_grad=True) for d in saved]
        with Tape() as inner:
            replay = _as_tuple(fn(*replay_inputs))
        if expected is not None:
            for got, want in zip(replay, expected):
                if not np.array_equal(got.data, want):
                    inner.release()
                    logger.error("❌ [CKPT_REPLAY] 구간 재실행 불일치 감지")
                    raise NondeterministicSegmentError("체크포인트 구간 재실행 결과가 기록된 출력과 다릅니다")
        seeds = []
        offset = 0
        for out, shape, size in zip(replay, shapes, sizes):
            seeds.append((out, g[offset:offset + size].reshape(shape)))
            offset += size
        leaf_grads = run_backward(inner, seeds)
        inner.release()
        replay_ids = {id(t) for t in replay_inputs}
        for key, (leaf, lg) in leaf_grads.items():
            if key not in replay_ids:
                sink(leaf, lg)
        zeros = [np.zeros_like(d) for d in saved]
        return tuple(
            leaf_grads[id(t)][1] if id(t) in leaf_grads else z
            for t, z in zip(replay_inputs, zeros)
        )

    packed_tensor = _record("checkpoint", tuple(inputs), packed, vjp, segment=True)
    start = packed_tensor._node if packed_tensor._node is not None else -1

    results: List[Tensor] = []
    offset = 0
    for shape, size in zip(shapes, sizes):
        piece = getitem(packed_tensor, slice(offset, offset + size))
        results.append(reshape(piece, shape))
        offset += size
    end = results[-1]._node if results and results[-1]._node is not None else start
    outer.checkpoint_segments.append(CheckpointSegment(start=start, end=end, saved_inputs=saved))
    return results[0] if single else tuple(results)
