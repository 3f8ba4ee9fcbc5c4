"""공용 레이어: dense / 3x3 conv / 시간 임베딩

가중치는 LayerStore가 이름으로 내어 주고, 어댑터 기여분(LoRA)도 store가 결정한다.
"""

import math
from typing import Optional, Protocol, Sequence, Union

import numpy as np

from app.core.tensor import Tensor, get_dtype, im2col, matmul, reshape, transpose


class LayerStore(Protocol):
    def weight(self, name: str) -> Tensor: ...

    def bias(self, name: str) -> Tensor: ...

    def adapter_out(self, name: str, x2d: Tensor) -> Optional[Tensor]: ...


def weight_matrix(w: Tensor) -> Tensor:
    """conv 커널 (O,C,3,3)은 (O, C*9) 행렬로 본다"""
    return w if w.ndim == 2 else reshape(w, (w.shape[0], int(np.prod(w.shape[1:]))))


def dense(store: LayerStore, name: str, x2d: Tensor) -> Tensor:
    """x @ Wᵀ + b (+ 어댑터)"""
    out = matmul(x2d, transpose(weight_matrix(store.weight(name)))) + store.bias(name)
    extra = store.adapter_out(name, x2d)
    return out if extra is None else out + extra


def conv3x3(store: LayerStore, name: str, x: Tensor) -> Tensor:
    """(N,C,H,W) → (N,O,H,W), stride 1, same padding"""
    n, _, h, w = x.shape
    out = dense(store, name, im2col(x))
    return transpose(reshape(out, (n, h, w, out.shape[1])), (0, 3, 1, 2))


def timestep_embedding(t: Union[int, Sequence[int]], dim: int) -> np.ndarray:
    """사인/코사인 시간 임베딩 (N, dim) 상수"""
    steps = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    args = steps[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(steps), 1))], axis=1)
    return emb.astype(get_dtype())
