"""조건부 노이즈 예측 네트워크 ε_θ(x_t, c, t), LoRA 어댑터, classifier-free guidance

구조: conv_in → residual block × n (임베딩 투영 더하기, silu, conv, silu, conv) → silu → conv_out.
시간 임베딩(사인/코사인 → linear → silu)과 클래스 임베딩을 더해 각 block 입력에 투영해 더한다.
어댑터가 붙는 레이어: 모든 conv와 투영(linear) 레이어. conv는 평탄화한 커널 행렬을 분해한다.
"""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import CheckpointFormatError, ShapeError, ValidationError
from app.core.tensor import Tensor, embedding, matmul, reshape, silu, transpose
from app.schemas.config import ArchitectureConfig
from app.services.layers import conv3x3, dense, timestep_embedding
from app.services.schedule import NoiseSchedule
from app.utils.checkpoint_io import load_checkpoint, save_checkpoint
from app.utils.logger import get_logger
from app.utils.rng import KeyedRng

logger = get_logger(__name__)

NULL_TOKEN = -1
IMAGE_CHANNELS = 3
LORA_PREFIX = "lora/"

TimeArg = Union[int, Sequence[int]]


@dataclass(frozen=True)
class Context:
    """조건 c: 클래스 id 또는 빈 조건 ∅ (NULL_TOKEN)"""
    class_id: int

    @classmethod
    def null(cls) -> "Context":
        return cls(NULL_TOKEN)

    @property
    def is_null(self) -> bool:
        return self.class_id == NULL_TOKEN

    def index(self, n_classes: int) -> int:
        """임베딩 테이블 행 번호 (∅는 마지막 행)"""
        if self.is_null:
            return n_classes
        if not 0 <= self.class_id < n_classes:
            raise ValidationError(f"클래스 id 범위 초과: {self.class_id} (C={n_classes})")
        return self.class_id


@dataclass
class LoraAdapter:
    """h = W₀x + B·A·x 의 (A, B) 쌍"""
    layer_name: str
    A: Tensor  # (r, d_in)
    B: Tensor  # (d_out, r)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(self) -> np.ndarray:
        """ΔW = B·A"""
        return self.B.data @ self.A.data

    def parameter_count(self) -> int:
        return self.A.size + self.B.size


AdapterSet = Dict[str, LoraAdapter]
MergedDeltas = Dict[str, Tensor]


def adapted_layer_names(spec: ArchitectureConfig) -> List[str]:
    names = ["conv_in", "time_mlp"]
    for i in range(spec.n_blocks):
        names += [f"blocks.{i}.proj", f"blocks.{i}.conv1", f"blocks.{i}.conv2"]
    names.append("conv_out")
    return names


@dataclass
class DenoiserParams:
    """고정 base 가중치 + 이름 붙은 LoRA 어댑터 (또는 병합된 ΔW)"""
    spec: ArchitectureConfig
    base: Dict[str, Tensor]
    adapters: AdapterSet = field(default_factory=dict)
    merged: MergedDeltas = field(default_factory=dict)
    lora_scale: float = 1.0

    # LayerStore
    def weight(self, name: str) -> Tensor:
        return self.base[f"{name}.weight"]

    def bias(self, name: str) -> Tensor:
        return self.base[f"{name}.bias"]

    def adapter_out(self, name: str, x2d: Tensor) -> Optional[Tensor]:
        if self.lora_scale == 0.0:
            return None
        out: Optional[Tensor] = None
        adapter = self.adapters.get(name)
        if adapter is not None:
            out = matmul(matmul(x2d, transpose(adapter.A)), transpose(adapter.B))
        delta = self.merged.get(name)
        if delta is not None:
            term = matmul(x2d, transpose(delta))
            out = term if out is None else out + term
        if out is None:
            return None
        return out * self.lora_scale

    # 파라미터 묶음
    def trainable(self) -> Dict[str, Tensor]:
        """미세조정 대상 텐서 (어댑터만), 이름 순서 고정"""
        named: Dict[str, Tensor] = {}
        for layer in sorted(self.adapters):
            adapter = self.adapters[layer]
            named[f"{LORA_PREFIX}{layer}/A"] = adapter.A
            named[f"{LORA_PREFIX}{layer}/B"] = adapter.B
        return named

    def set_base_trainable(self, enabled: bool) -> None:
        for t in self.base.values():
            t.requires_grad = enabled

    def base_only(self) -> "DenoiserParams":
        return replace(self, adapters={}, merged={}, lora_scale=1.0)

    def merged_form(self) -> "DenoiserParams":
        """샘플링/평가용: 분해된 어댑터를 ΔW = B·A로 병합"""
        if not self.adapters:
            return self
        deltas = dict(self.merged)
        for layer, delta in merge_adapters(self.adapters).items():
            deltas[layer] = Tensor(deltas[layer].data + delta.data) if layer in deltas else delta
        return replace(self, adapters={}, merged=deltas)

    def with_merged(self, deltas: MergedDeltas) -> "DenoiserParams":
        return replace(self, adapters={}, merged=dict(deltas))

    def base_parameter_count(self) -> int:
        return sum(t.size for t in self.base.values())

    def adapter_parameter_count(self) -> int:
        return sum(a.parameter_count() for a in self.adapters.values())


def _normal(rng: KeyedRng, tag: str, shape: Tuple[int, ...], std: float) -> Tensor:
    return Tensor(rng.normal(tag, shape) * std)


def init_denoiser(spec: ArchitectureConfig, seed: int) -> DenoiserParams:
    """base 가중치 초기화 (출력층은 0에 가깝게 시작)"""
    rng = KeyedRng(seed).child("denoiser-init")
    c, e = spec.channels, spec.emb_dim
    base: Dict[str, Tensor] = {}

    def conv(name: str, c_out: int, c_in: int, gain: float) -> None:
        fan_in = c_in * 9
        base[f"{name}.weight"] = _normal(rng, name, (c_out, c_in, 3, 3), gain / np.sqrt(fan_in))
        base[f"{name}.bias"] = Tensor(np.zeros(c_out))

    def linear(name: str, d_out: int, d_in: int, gain: float) -> None:
        base[f"{name}.weight"] = _normal(rng, name, (d_out, d_in), gain / np.sqrt(d_in))
        base[f"{name}.bias"] = Tensor(np.zeros(d_out))

    conv("conv_in", c, IMAGE_CHANNELS, np.sqrt(2.0))
    linear("time_mlp", e, e, 1.0)
    base["class_emb.weight"] = _normal(rng, "class_emb", (spec.n_classes + 1, e), 0.5)
    for i in range(spec.n_blocks):
        linear(f"blocks.{i}.proj", c, e, 1.0)
        conv(f"blocks.{i}.conv1", c, c, np.sqrt(2.0))
        conv(f"blocks.{i}.conv2", c, c, 0.5)
    conv("conv_out", IMAGE_CHANNELS, c, 0.01)

    params = DenoiserParams(spec=spec, base=base)
    logger.info(f"🧱 [DENOISER] 초기화: base 파라미터 {params.base_parameter_count():,}개")
    return params


def attach_adapters(params: DenoiserParams, rank: int, seed: int) -> DenoiserParams:
    """모든 적응 레이어에 (A ~ N(0, 1/d_in), B = 0) 어댑터를 붙인다 (붙인 직후 출력은 base와 같다)"""
    if rank < 1:
        raise ValidationError(f"LoRA rank는 1 이상이어야 합니다: {rank}")
    rng = KeyedRng(seed).child("lora-init")
    adapters: AdapterSet = {}
    for layer in adapted_layer_names(params.spec):
        w = params.weight(layer)
        d_out, d_in = w.shape[0], int(np.prod(w.shape[1:]))
        r = min(rank, d_in, d_out)
        a = Tensor(rng.normal(layer, (r, d_in)) / np.sqrt(d_in), requires_grad=True, name=f"{LORA_PREFIX}{layer}/A")
        b = Tensor(np.zeros((d_out, r)), requires_grad=True, name=f"{LORA_PREFIX}{layer}/B")
        adapters[layer] = LoraAdapter(layer_name=layer, A=a, B=b)
    params.set_base_trainable(False)
    attached = replace(params, adapters=adapters, merged={}, lora_scale=1.0)
    logger.info(
        f"🔧 [LORA] rank {rank} 어댑터 {len(adapters)}개 부착 "
        f"(학습 파라미터 {attached.adapter_parameter_count():,} / base {params.base_parameter_count():,})"
    )
    return attached


# ---------------------------------------------------------------------------
# 순전파
# ---------------------------------------------------------------------------

def _contexts(c: Union[Context, Sequence[Context]], n: int) -> List[Context]:
    items = [c] * n if isinstance(c, Context) else list(c)
    if len(items) != n:
        raise ShapeError(f"조건 개수({len(items)})와 배치 크기({n})가 다릅니다")
    return items


def eps_theta(
    params: DenoiserParams,
    x_t: Tensor,
    c: Union[Context, Sequence[Context]],
    t: TimeArg,
    grid: Optional[NoiseSchedule] = None,
) -> Tensor:
    """노이즈 예측. x_t는 (3,H,W) 한 장 또는 (N,3,H,W) 배치

    grid가 주어지면(미세조정 모드) t가 샘플러 그리드 위에 있어야 한다.
    """
    spec = params.spec
    single = x_t.ndim == 3
    x = reshape(x_t, (1,) + x_t.shape) if single else x_t
    expected = (IMAGE_CHANNELS, spec.image_size, spec.image_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"입력 shape {x_t.shape}, 기대값 {expected}")
    n = x.shape[0]

    steps = [int(t)] * n if np.ndim(t) == 0 else [int(s) for s in t]  # type: ignore[arg-type]
    if len(steps) != n:
        raise ShapeError(f"t 개수({len(steps)})와 배치 크기({n})가 다릅니다")
    if grid is not None:
        off = [s for s in steps if not grid.is_on_grid(s)]
        if off:
            raise ValidationError(f"샘플러 그리드 밖의 t: {off[:3]}")

    rows = [ctx.index(spec.n_classes) for ctx in _contexts(c, n)]
    h_t = silu(dense(params, "time_mlp", Tensor(timestep_embedding(steps, spec.emb_dim))))
    emb = silu(h_t + embedding(params.base["class_emb.weight"], rows))

    h = conv3x3(params, "conv_in", x)
    for i in range(spec.n_blocks):
        proj = reshape(dense(params, f"blocks.{i}.proj", emb), (n, spec.channels, 1, 1))
        hb = h + proj
        r = conv3x3(params, f"blocks.{i}.conv1", silu(hb))
        r = conv3x3(params, f"blocks.{i}.conv2", silu(r))
        h = hb + r
    out = conv3x3(params, "conv_out", silu(h))
    return reshape(out, x_t.shape) if single else out


def cfg_eps(
    params: DenoiserParams,
    x_t: Tensor,
    c: Context,
    t: int,
    w: float,
    grid: Optional[NoiseSchedule] = None,
) -> Tensor:
    """(1+w)·ε(x_t, c, t) − w·ε(x_t, ∅, t)"""
    if c.is_null:
        raise ValidationError("guidance에는 ∅가 아닌 조건이 필요합니다")
    e_cond = eps_theta(params, x_t, c, t, grid)
    if w == 0:
        return e_cond
    e_uncond = eps_theta(params, x_t, Context.null(), t, grid)
    return (1.0 + w) * e_cond - w * e_uncond


# ---------------------------------------------------------------------------
# LoRA 산술
# ---------------------------------------------------------------------------

def lora_scale_set(params: DenoiserParams, alpha: float) -> DenoiserParams:
    """어댑터 기여분을 alpha·B·A·x로 (base는 그대로)"""
    return replace(params, lora_scale=float(alpha))


def merge_adapters(adapters: Mapping[str, LoraAdapter]) -> MergedDeltas:
    return {layer: Tensor(adapter.delta()) for layer, adapter in adapters.items()}


def lora_mix(
    a: Mapping[str, Union[LoraAdapter, Tensor]],
    b: Mapping[str, Union[LoraAdapter, Tensor]],
    alpha: float,
    beta: float,
) -> MergedDeltas:
    """레이어별 alpha·ΔW_a + beta·ΔW_b (곱 ΔW = B·A 위에서 선형 결합해 병합 저장)"""
    if set(a) != set(b):
        raise ValidationError(f"어댑터 레이어 집합이 다릅니다: {sorted(set(a) ^ set(b))[:4]}")
    mixed: MergedDeltas = {}
    for layer in sorted(a):
        da, db = a[layer], b[layer]
        if isinstance(da, LoraAdapter) and isinstance(db, LoraAdapter) and da.rank != db.rank:
            raise ValidationError(f"[{layer}] rank가 다릅니다: {da.rank} vs {db.rank}")
        delta_a = da.delta() if isinstance(da, LoraAdapter) else da.data
        delta_b = db.delta() if isinstance(db, LoraAdapter) else db.data
        if delta_a.shape != delta_b.shape:
            raise ValidationError(f"[{layer}] ΔW shape이 다릅니다: {delta_a.shape} vs {delta_b.shape}")
        mixed[layer] = Tensor(alpha * delta_a + beta * delta_b)
    logger.info(f"🎛️ [LORA_MIX] α={alpha}, β={beta}, 레이어 {len(mixed)}개")
    return mixed


# ---------------------------------------------------------------------------
# 체크포인트
# ---------------------------------------------------------------------------

def save_denoiser(path: str, params: DenoiserParams, schedule: NoiseSchedule) -> str:
    """base 가중치와 구조/스케줄 메타를 저장하고 경로를 반환"""
    meta = {"kind": "denoiser", "architecture": params.spec.model_dump(), "schedule": schedule.to_meta()}
    save_checkpoint(path, params.base, meta)
    return path


def load_denoiser(path: str) -> Tuple[DenoiserParams, Dict[str, Any]]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise CheckpointFormatError(f"denoiser 체크포인트가 아닙니다: {path} (kind={meta.get('kind')})")
    spec = ArchitectureConfig(**meta["architecture"])
    params = DenoiserParams(spec=spec, base={k: Tensor(v) for k, v in tensors.items()})
    expected = init_shapes(spec)
    if {k: v.shape for k, v in params.base.items()} != expected:
        raise CheckpointFormatError(f"denoiser 가중치 구성이 구조 설정과 맞지 않습니다: {path}")
    return params, meta


def init_shapes(spec: ArchitectureConfig) -> Dict[str, Tuple[int, ...]]:
    c, e = spec.channels, spec.emb_dim
    shapes: Dict[str, Tuple[int, ...]] = {
        "conv_in.weight": (c, IMAGE_CHANNELS, 3, 3), "conv_in.bias": (c,),
        "time_mlp.weight": (e, e), "time_mlp.bias": (e,),
        "class_emb.weight": (spec.n_classes + 1, e),
        "conv_out.weight": (IMAGE_CHANNELS, c, 3, 3), "conv_out.bias": (IMAGE_CHANNELS,),
    }
    for i in range(spec.n_blocks):
        shapes[f"blocks.{i}.proj.weight"] = (c, e)
        shapes[f"blocks.{i}.proj.bias"] = (c,)
        for conv in ("conv1", "conv2"):
            shapes[f"blocks.{i}.{conv}.weight"] = (c, c, 3, 3)
            shapes[f"blocks.{i}.{conv}.bias"] = (c,)
    return shapes


def save_adapters(path: str, params: DenoiserParams, extra_meta: Optional[Dict[str, Any]] = None) -> str:
    """분해된 어댑터는 lora/<layer>/A|B, 병합된 ΔW는 lora/<layer>/delta 로 저장"""
    tensors: Dict[str, Any] = dict(params.trainable())
    for layer, delta in params.merged.items():
        tensors[f"{LORA_PREFIX}{layer}/delta"] = delta
    meta = {"kind": "adapters", "lora_scale": params.lora_scale, **(extra_meta or {})}
    save_checkpoint(path, tensors, meta)
    return path


def load_adapters(path: str, params: DenoiserParams) -> DenoiserParams:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "adapters":
        raise CheckpointFormatError(f"어댑터 체크포인트가 아닙니다: {path}")
    factors: Dict[str, Dict[str, np.ndarray]] = {}
    merged: MergedDeltas = {}
    for name, arr in tensors.items():
        if not name.startswith(LORA_PREFIX):
            raise CheckpointFormatError(f"어댑터 텐서 이름은 '{LORA_PREFIX}'로 시작해야 합니다: {name}")
        layer, _, part = name[len(LORA_PREFIX):].rpartition("/")
        if f"{layer}.weight" not in params.base:
            raise CheckpointFormatError(f"base에 없는 레이어의 어댑터: {layer}")
        if part == "delta":
            merged[layer] = Tensor(arr)
        elif part in ("A", "B"):
            factors.setdefault(layer, {})[part] = arr
        else:
            raise CheckpointFormatError(f"알 수 없는 어댑터 텐서: {name}")
    adapters: AdapterSet = {}
    for layer, pair in factors.items():
        if set(pair) != {"A", "B"}:
            raise CheckpointFormatError(f"[{layer}] A/B 쌍이 불완전합니다")
        adapters[layer] = LoraAdapter(
            layer_name=layer,
            A=Tensor(pair["A"], requires_grad=True, name=f"{LORA_PREFIX}{layer}/A"),
            B=Tensor(pair["B"], requires_grad=True, name=f"{LORA_PREFIX}{layer}/B"),
        )
    params.set_base_trainable(False)
    return replace(params, adapters=adapters, merged=merged, lora_scale=float(meta.get("lora_scale", 1.0)))
