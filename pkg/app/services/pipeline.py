"""실행 파이프라인 공통 부분: 모델 로드, 샘플 생성/내보내기, 평가, LoRA 표, 기울기 검증, 매니페스트"""

import json
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from app import __version__
from app.core.errors import ValidationError
from app.core.gradcheck import finite_diff_check_leaves
from app.core.tensor import Tensor, get_precision, no_grad, precision
from app.schemas.config import ArchitectureConfig, FinetuneConfig, FinetuneMode, GradCheckConfig, RewardSpec
from app.schemas.records import EvalSummary, RewardSummary, RunManifest
from app.services.dataset import class_name
from app.services.denoiser import (
    Context,
    DenoiserParams,
    MergedDeltas,
    attach_adapters,
    init_denoiser,
    load_adapters,
    load_denoiser,
    lora_mix,
    lora_scale_set,
)
from app.services.finetune import Rewards, example_objective, frozen_inputs
from app.services.rewards import build_reward, evaluate_rewards, to_unit_range
from app.services.sampler import SamplerSettings, ancestral_sample, lora_window_sample, sample
from app.services.schedule import NoiseSchedule, make_schedule, schedule_from_meta
from app.utils.checkpoint_io import file_digest
from app.utils.images import make_grid, write_png, write_ppm
from app.utils.logger import get_logger
from app.utils.rng import KeyedRng

logger = get_logger(__name__)

EVAL_POOL_TAG = "eval-pool"


@dataclass
class GeneratedSample:
    class_id: int
    index: int
    image: np.ndarray  # (3,H,W) 보상 공간 [0,1] (클램프 전)


# ---------------------------------------------------------------------------
# 로드
# ---------------------------------------------------------------------------

def load_model(
    checkpoint: str,
    sampler_steps: int,
    adapters: Optional[str] = None,
    lora_scale: float = 1.0,
) -> Tuple[DenoiserParams, NoiseSchedule]:
    """denoiser(+어댑터)를 읽어 샘플링용 병합 형태로 반환"""
    params, meta = load_denoiser(checkpoint)
    schedule = schedule_from_meta(meta["schedule"], sampler_steps)
    if adapters:
        params = load_adapters(adapters, params).merged_form()
    return lora_scale_set(params, lora_scale), schedule


# ---------------------------------------------------------------------------
# 생성과 평가
# ---------------------------------------------------------------------------

def pool_latent(seed: int, spec: ArchitectureConfig, class_id: int, index: int) -> np.ndarray:
    """평가 seed pool의 x_T (모델과 무관하게 (seed, class, index)로 고정)"""
    shape = (3, spec.image_size, spec.image_size)
    return KeyedRng(seed).child(EVAL_POOL_TAG).normal("x_T", shape, class_id, index)


def generate_samples(
    params: DenoiserParams,
    classes: Sequence[int],
    n_per_class: int,
    schedule: NoiseSchedule,
    guidance_w: float,
    seed: int,
    sampler: Literal["ddim", "ancestral"] = "ddim",
) -> List[GeneratedSample]:
    if n_per_class < 1:
        raise ValidationError(f"클래스별 샘플 수는 1 이상이어야 합니다: {n_per_class}")
    rng = KeyedRng(seed)
    settings = SamplerSettings(guidance_w=guidance_w, checkpointing=False)
    out: List[GeneratedSample] = []
    with no_grad():
        for c in classes:
            for i in range(n_per_class):
                x_T = Tensor(pool_latent(seed, params.spec, c, i))
                if sampler == "ancestral":
                    trace = ancestral_sample(params, Context(c), x_T, schedule, rng, guidance_w,
                                             index=c * n_per_class + i)
                else:
                    trace = sample(params, Context(c), x_T, schedule, settings)
                out.append(GeneratedSample(c, i, to_unit_range(trace.x0).data.astype(np.float64)))
    return out


def summarize(values: Sequence[float]) -> RewardSummary:
    arr = np.asarray(values, dtype=np.float64)
    return RewardSummary(mean=float(arr.mean()), std=float(arr.std()), n=len(arr))


def eval_model(
    params: DenoiserParams,
    rewards: Rewards,
    n_samples: int,
    schedule: NoiseSchedule,
    classes: Sequence[int],
    guidance_w: float,
    seed: int,
) -> EvalSummary:
    """고정 seed pool에서 클래스별 n_samples개 생성 후 보상 평균/표준편차"""
    if n_samples < 1:
        raise ValidationError(f"n_samples는 1 이상이어야 합니다: {n_samples}")
    samples = generate_samples(params, classes, n_samples, schedule, guidance_w, seed)
    values: Dict[str, List[float]] = {}
    per_class_values: Dict[str, Dict[str, List[float]]] = {}
    for s in samples:
        scores = evaluate_rewards(rewards, s.image, Context(s.class_id))
        key = str(s.class_id)
        for name, v in scores.items():
            values.setdefault(name, []).append(v)
            per_class_values.setdefault(key, {}).setdefault(name, []).append(v)
    summary = EvalSummary(
        n_samples=n_samples,
        seed_pool=seed,
        overall={k: summarize(v) for k, v in values.items() if k != "combined"},
        per_class={c: {k: summarize(v) for k, v in d.items()} for c, d in per_class_values.items()},
        combined=summarize(values["combined"]),
    )
    logger.info(f"📊 [EVAL] {len(samples)}개 샘플, combined 평균 {summary.combined.mean:.4f}")
    for c in classes:
        combined = summary.per_class[str(c)]["combined"]
        logger.debug(f"  - {class_name(c)}: {combined.mean:.4f} ± {combined.std:.4f}")
    return summary


def export_samples(samples: Sequence[GeneratedSample], out_dir: Path, png: bool = False,
                   prefix: str = "sample") -> List[str]:
    """샘플별 PPM과 그리드 (PPM, 선택적으로 PNG)"""
    paths: List[str] = []
    for s in samples:
        paths.append(str(write_ppm(out_dir / f"{prefix}_c{s.class_id}_{s.index:03d}.ppm", s.image)))
    if samples:
        ncols = max(1, len({s.index for s in samples}))
        grid = make_grid([s.image for s in samples], ncols=ncols)
        paths.append(str(write_ppm(out_dir / f"{prefix}_grid.ppm", grid)))
        if png:
            paths.append(str(write_png(out_dir / f"{prefix}_grid.png", grid)))
    return paths


# ---------------------------------------------------------------------------
# LoRA 표
# ---------------------------------------------------------------------------

def _table_row(summary: EvalSummary, **keys: float) -> Dict[str, Any]:
    row: Dict[str, Any] = dict(keys)
    row["combined"] = summary.combined.mean
    for name, s in sorted(summary.overall.items()):
        row[name] = s.mean
    return row


def lora_scale_table(
    params: DenoiserParams,
    alphas: Sequence[float],
    rewards: Rewards,
    n_samples: int,
    schedule: NoiseSchedule,
    classes: Sequence[int],
    guidance_w: float,
    seed: int,
) -> List[Dict[str, Any]]:
    """α별 평균 보상 (α=0은 base 모델과 같다)"""
    rows = []
    for alpha in alphas:
        summary = eval_model(lora_scale_set(params, alpha), rewards, n_samples, schedule, classes, guidance_w, seed)
        rows.append(_table_row(summary, alpha=alpha))
        logger.info(f"🎛️ [LORA_SCALE] α={alpha:g}: {summary.combined.mean:.4f}")
    return rows


def lora_mix_table(
    base: DenoiserParams,
    deltas_a: MergedDeltas,
    deltas_b: MergedDeltas,
    pairs: Sequence[Tuple[float, float]],
    rewards: Rewards,
    n_samples: int,
    schedule: NoiseSchedule,
    classes: Sequence[int],
    guidance_w: float,
    seed: int,
) -> List[Dict[str, Any]]:
    """(α, β)별 평균 보상 (α·ΔW_a + β·ΔW_b를 병합해 샘플링)"""
    rows = []
    for alpha, beta in pairs:
        mixed = base.with_merged(lora_mix(deltas_a, deltas_b, alpha, beta))
        summary = eval_model(mixed, rewards, n_samples, schedule, classes, guidance_w, seed)
        rows.append(_table_row(summary, alpha=alpha, beta=beta))
    return rows


def lora_window_table(
    params: DenoiserParams,
    window: Literal["start", "end"],
    windows: Sequence[int],
    rewards: Rewards,
    n_per_class: int,
    schedule: NoiseSchedule,
    classes: Sequence[int],
    guidance_w: float,
    seed: int,
) -> Tuple[List[Dict[str, Any]], Dict[int, List[GeneratedSample]]]:
    """M별 (어댑터를 M 스텝에만 적용한) 샘플과 평균 보상"""
    rows: List[Dict[str, Any]] = []
    images: Dict[int, List[GeneratedSample]] = {}
    for M in windows:
        samples: List[GeneratedSample] = []
        for c in classes:
            for i in range(n_per_class):
                x_T = Tensor(pool_latent(seed, params.spec, c, i))
                trace = lora_window_sample(params, Context(c), x_T, schedule, window, M, guidance_w)
                samples.append(GeneratedSample(c, i, to_unit_range(trace.x0).data.astype(np.float64)))
        combined = [evaluate_rewards(rewards, s.image, Context(s.class_id))["combined"] for s in samples]
        rows.append({"window": window, "M": M, "combined": float(np.mean(combined))})
        images[M] = samples
        logger.info(f"🪟 [LORA_WINDOW] {window} M={M}: {rows[-1]['combined']:.4f}")
    return rows, images


# ---------------------------------------------------------------------------
# 기울기 검증 (64비트 마이크로 모델)
# ---------------------------------------------------------------------------

MICRO_SPEC = ArchitectureConfig(image_size=8, channels=4, n_blocks=1, emb_dim=4)


def micro_model(seed: int, rank: int = 2, gain: float = 30.0) -> DenoiserParams:
    """기울기 검증용 소형 denoiser: B ≠ 0인 어댑터, 출력층에 gain을 곱해 궤적이 파라미터에 민감하게"""
    params = attach_adapters(init_denoiser(MICRO_SPEC, seed), rank, seed)
    rng = KeyedRng(seed).child("grad-check")
    out_w = params.base["conv_out.weight"]
    out_w.data = out_w.data * gain
    for layer, adapter in sorted(params.adapters.items()):
        adapter.B.data = rng.normal(f"B/{layer}", adapter.B.shape) * 0.1
    return params


def grad_check(config: GradCheckConfig) -> Dict[str, float]:
    """모드/K별 어댑터 기울기와 종단간 목적함수 중앙 차분의 최대 상대 오차"""
    results: Dict[str, float] = {}
    with precision("f64"):
        params = micro_model(config.seed)
        schedule = make_schedule(1000, config.sampler_steps)
        rewards = [(build_reward("rotation"), 1.0)]
        leaves = params.trainable()
        total = sum(t.size for t in params.base.values()) + sum(t.size for t in leaves.values())
        logger.info(f"🧪 [GRAD_CHECK] 마이크로 모델 파라미터 {total:,}개, S={config.sampler_steps}")
        coord_rng = KeyedRng(config.seed).child("grad-check-coords")
        coords = {
            name: sorted(coord_rng.generator(name).choice(t.size, min(config.coords_per_leaf, t.size),
                                                        replace=False).tolist())
            for name, t in leaves.items()
        }
        runs: List[Tuple[str, FinetuneConfig]] = []
        for mode in config.modes:
            if mode == FinetuneMode.DRAFT_K:
                for K in config.k_list:
                    if not 1 <= K <= config.sampler_steps:
                        raise ValidationError(f"K는 1..S 범위여야 합니다: K={K}")
                    runs.append((f"draft_k/K={K}", _check_config(config, mode, K)))
            else:
                runs.append((mode.value, _check_config(config, mode, 1)))
        c = Context(0)
        rng = KeyedRng(config.seed)
        for label, ft in runs:
            # stop_grad 지점 값 고정
            frozen = frozen_inputs(params, ft, c, schedule, rng, 1, 0)

            def objective(ft: FinetuneConfig = ft, frozen: Dict[str, np.ndarray] = frozen) -> Tensor:
                value, _, _, _ = example_objective(params, ft, c, schedule, rewards, rng, 1, 0, frozen=frozen)
                return value

            worst, _ = finite_diff_check_leaves(objective, leaves, eps=config.eps, floor=1e-8, coords=coords)
            results[label] = worst
            logger.info(f"🧪 [GRAD_CHECK] {label}: 최대 상대 오차 {worst:.3e}")
    return results


def _check_config(config: GradCheckConfig, mode: FinetuneMode, K: int) -> FinetuneConfig:
    return FinetuneConfig(
        seed=config.seed,
        mode=mode,
        K=K,
        m=1,
        n=2,
        guidance_w=config.guidance_w,
        sampler_steps=config.sampler_steps,
        rewards=[RewardSpec(name="rotation")],
    )


# ---------------------------------------------------------------------------
# 매니페스트
# ---------------------------------------------------------------------------

def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=5, check=True,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(
    out_dir: Path,
    command: str,
    config: Any,
    checkpoints: Optional[Dict[str, str]] = None,
    outputs: Optional[Sequence[str]] = None,
    metrics_path: Optional[str] = None,
) -> Path:
    """manifest.json: 설정 스냅샷, seed, 체크포인트와 digest"""
    checkpoints = dict(checkpoints or {})
    digests = {name: file_digest(path) for name, path in sorted(checkpoints.items()) if Path(path).exists()}
    manifest = RunManifest(
        command=command,
        version=__version__,
        seed=int(getattr(config, "seed", 0)),
        precision=get_precision(),
        config=json.loads(config.model_dump_json()),
        checkpoints=checkpoints,
        digests=digests,
        metrics_path=metrics_path,
        outputs=list(outputs or []),
        git_describe=git_describe(),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"🧾 [MANIFEST] {path}")
    return path
