"""K 진단: 기울기 노름/각도, 노름 추세, 추정량 분산, 클리핑 ablation

모든 진단은 같은 (seed, step, index) 키를 공유하므로 K 값들이 같은 궤적 위에서 비교된다.
"""

import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.core.errors import ValidationError  # noqa: E402
from app.core.tensor import Tensor  # noqa: E402
from app.schemas.config import DiagConfig, FinetuneConfig, FinetuneMode  # noqa: E402
from app.schemas.records import ClipAblationRow, KDiagRow, VarianceRow  # noqa: E402
from app.services.denoiser import Context, DenoiserParams, attach_adapters  # noqa: E402
from app.services.finetune import Rewards, draw_contexts, finetune, reward_grad_step  # noqa: E402
from app.services.schedule import NoiseSchedule  # noqa: E402
from app.utils.logger import get_logger  # noqa: E402
from app.utils.rng import KeyedRng  # noqa: E402

logger = get_logger(__name__)

_SHARED_FIELDS = (
    "seed", "guidance_w", "sampler_steps", "checkpointing", "rewards", "jpeg_quality", "jpeg_rounding",
    "scorer_checkpoint", "classifier_checkpoint", "target_class", "classes", "base_checkpoint",
    "lora_rank", "batch", "lr", "weight_decay", "n",
)


def finetune_config_from(diag: DiagConfig, **updates: object) -> FinetuneConfig:
    """진단 설정 → 같은 샘플링/보상 옵션의 FinetuneConfig"""
    fields = diag.model_dump(include=set(_SHARED_FIELDS))
    fields["beta_kl"] = 0.0
    fields["m"] = min(FinetuneConfig.model_fields["m"].default, diag.sampler_steps)
    fields.update(updates)
    return FinetuneConfig.model_validate(fields)


def flatten_grads(grads: Dict[str, Tensor]) -> np.ndarray:
    """이름 순서로 이어 붙인 float64 벡터"""
    if not grads:
        return np.zeros(0)
    return np.concatenate([np.asarray(grads[k].data, dtype=np.float64).ravel() for k in sorted(grads)])


def grad_angle(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """arccos(⟨a,b⟩/(‖a‖‖b‖)), 한쪽이 영벡터면 None"""
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return None
    cos = float(np.dot(a, b)) / (na * nb)
    return math.acos(max(-1.0, min(1.0, cos)))


def _grad_vectors(
    params: DenoiserParams,
    base_config: FinetuneConfig,
    contexts: Sequence[Context],
    k_values: Sequence[int],
    schedule: NoiseSchedule,
    rewards: Rewards,
    rng: KeyedRng,
    step: int,
) -> Dict[int, np.ndarray]:
    vectors: Dict[int, np.ndarray] = {}
    for K in sorted(set(k_values) | {1}):
        cfg = base_config.model_copy(update={"mode": FinetuneMode.DRAFT_K, "K": K, "beta_kl": 0.0})
        grads, _ = reward_grad_step(params, cfg, contexts, schedule, rewards, rng, step)
        vectors[K] = flatten_grads(grads)
    return vectors


def k_diagnostics(
    params: DenoiserParams,
    contexts: Sequence[Context],
    k_list: Sequence[int],
    schedule: NoiseSchedule,
    rewards: Rewards,
    config: FinetuneConfig,
    step: int = 0,
) -> List[KDiagRow]:
    """K별 어댑터 기울기 노름과 DRaFT-1 기울기와의 각도 (같은 배치, 같은 난수)"""
    for K in k_list:
        if not 1 <= K <= schedule.sampler_steps:
            raise ValidationError(f"K는 1..S 범위여야 합니다: K={K}, S={schedule.sampler_steps}")
    rng = KeyedRng(config.seed)
    vectors = _grad_vectors(params, config, contexts, k_list, schedule, rewards, rng, step)
    rows: List[KDiagRow] = []
    for K in k_list:
        angle = grad_angle(vectors[K], vectors[1])
        if angle is None:
            logger.warning(f"⚠️ [DIAG_K] K={K}: 영벡터 기울기라 각도를 정의할 수 없습니다")
        rows.append(KDiagRow(K=K, grad_norm=float(np.linalg.norm(vectors[K])), angle_to_k1=angle))
    return rows


def k_trend(
    params: DenoiserParams,
    diag: DiagConfig,
    schedule: NoiseSchedule,
    rewards: Rewards,
) -> List[KDiagRow]:
    """n_batches개 고정 배치에 대한 K별 노름 평균/중앙값과 평균 각도"""
    config = finetune_config_from(diag)
    rng = KeyedRng(diag.seed)
    norms: Dict[int, List[float]] = {K: [] for K in diag.k_list}
    angles: Dict[int, List[float]] = {K: [] for K in diag.k_list}
    logger.info(f"🔬 [DIAG_K] K={diag.k_list}, 배치 {diag.n_batches}개 × {diag.batch}")
    for b in range(diag.n_batches):
        contexts = draw_contexts(diag.classes, diag.batch, rng, b, tag="diag-prompts")
        vectors = _grad_vectors(params, config, contexts, diag.k_list, schedule, rewards, rng, b)
        for K in diag.k_list:
            norms[K].append(float(np.linalg.norm(vectors[K])))
            angle = grad_angle(vectors[K], vectors[1])
            if angle is None:
                logger.warning(f"⚠️ [DIAG_K] 배치 {b}, K={K}: 각도 없음 (영벡터)")
            else:
                angles[K].append(angle)
    rows = []
    for K in diag.k_list:
        rows.append(KDiagRow(
            K=K,
            grad_norm=float(np.mean(norms[K])),
            median_grad_norm=float(np.median(norms[K])),
            angle_to_k1=float(np.mean(angles[K])) if angles[K] else None,
        ))
        logger.info(f"📊 [DIAG_K] K={K}: median |g|={rows[-1].median_grad_norm:.4g}, angle={rows[-1].angle_to_k1}")
    return rows


def plot_k_trend(rows: Sequence[KDiagRow], path: Path) -> Path:
    """K별 기울기 노름(로그 축)과 각도 그래프 PNG"""
    ks = [r.K for r in rows]
    fig, (ax_norm, ax_angle) = plt.subplots(1, 2, figsize=(8, 3))
    ax_norm.plot(ks, [r.median_grad_norm if r.median_grad_norm is not None else r.grad_norm for r in rows], "o-")
    ax_norm.set_yscale("log")
    ax_norm.set_xlabel("K")
    ax_norm.set_ylabel("median grad norm")
    ax_angle.plot(ks, [math.degrees(r.angle_to_k1) if r.angle_to_k1 is not None else np.nan for r in rows], "o-")
    ax_angle.set_xlabel("K")
    ax_angle.set_ylabel("angle to K=1 (deg)")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(str(path), metadata={"Software": None})
    plt.close(fig)
    return path


def gradient_variance(
    params: DenoiserParams,
    config: FinetuneConfig,
    contexts: Sequence[Context],
    schedule: NoiseSchedule,
    rewards: Rewards,
    n_resamples: int = 64,
) -> float:
    """고정 어댑터에서 재추출 기울기들의 공분산 trace

    재추출 r은 step 키 r을 쓰므로 모드가 달라도 같은 x_T 집합을 공유한다.
    """
    if n_resamples < 2:
        raise ValidationError(f"분산 추정에는 재추출이 2회 이상 필요합니다: {n_resamples}")
    rng = KeyedRng(config.seed)
    vectors = []
    for r in range(n_resamples):
        grads, _ = reward_grad_step(params, config, contexts, schedule, rewards, rng, r)
        vectors.append(flatten_grads(grads))
    stacked = np.stack(vectors)
    return float(stacked.var(axis=0, ddof=1).sum())


def variance_report(
    params: DenoiserParams,
    config: FinetuneConfig,
    contexts: Sequence[Context],
    schedule: NoiseSchedule,
    rewards: Rewards,
    n_resamples: int = 64,
) -> VarianceRow:
    """같은 재추출 키로 DRaFT-LV(n+1 평균)와 DRaFT-1 분산 비교

    LV는 항상 n+1로 나눈 평균이라 DRaFT-1과 기울기 크기가 맞는다. 감소가 관측되지 않으면 경고를 남기고
    reduced=False로 기록한다.
    """
    lv = gradient_variance(params, config.model_copy(update={"mode": FinetuneMode.DRAFT_LV, "normalize_lv": True}),
                           contexts, schedule, rewards, n_resamples)
    one = gradient_variance(params, config.model_copy(update={"mode": FinetuneMode.DRAFT_K, "K": 1}),
                            contexts, schedule, rewards, n_resamples)
    row = VarianceRow(n=config.n, resamples=n_resamples, lv=lv, draft_1=one,
                      ratio=one / lv if lv > 0 else None, reduced=lv < one)
    ratio = f"{row.ratio:.2f}" if row.ratio is not None else "inf"
    logger.info(f"📊 [DIAG_VAR] LV(n={config.n}, 평균) {lv:.4g} vs DRaFT-1 {one:.4g} (비율 {ratio})")
    if not row.reduced:
        logger.warning(f"⚠️ [DIAG_VAR] 재추출 {n_resamples}회에서 LV 분산 감소가 관측되지 않았습니다")
    return row


def clip_ablation(
    base_params: DenoiserParams,
    diag: DiagConfig,
    schedule: NoiseSchedule,
    rewards: Rewards,
) -> List[ClipAblationRow]:
    """(K, c) 격자마다 새 어댑터로 짧은 미세조정 후 처음/마지막 구간 평균 보상"""
    rows: List[ClipAblationRow] = []
    window = max(1, diag.ablation_steps // 10)
    for K in diag.k_list:
        for c in diag.clip_list:
            params = attach_adapters(base_params.base_only(), diag.lora_rank, diag.seed)
            config = finetune_config_from(
                diag, mode=FinetuneMode.DRAFT_K, K=K, clip_norm=c, steps=diag.ablation_steps,
                log_every=max(1, diag.ablation_steps),
            )
            records = finetune(params, config, schedule, rewards)
            values = [r.reward_mean for r in records if r.reward_mean is not None]
            row = ClipAblationRow(
                K=K, clip_norm=c,
                first_reward=float(np.mean(values[:window])),
                final_reward=float(np.mean(values[-window:])),
            )
            logger.info(f"✂️ [CLIP_ABLATION] K={K}, c={c:g}: {row.first_reward:.4f} → {row.final_reward:.4f}")
            rows.append(row)
    return rows
