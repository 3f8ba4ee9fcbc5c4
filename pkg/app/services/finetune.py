"""사전학습 손실과 보상 미세조정 엔진 (DRaFT, DRaFT-K, DRaFT-LV, ReFL)

엔진은 보상을 최대화한다: 내부적으로 −r (+ KL 항)을 최소화한다.
배치 원소마다 별도 테이프에서 기울기를 구하고 고정된 인덱스 순서로 평균한다.
"""

import math
import time
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import NumericalError, ValidationError
from app.core.tensor import Tape, Tensor, backward, mean, no_grad, square, stop_grad, sum_
from app.schemas.config import FinetuneConfig, FinetuneMode, PretrainConfig
from app.schemas.records import MetricsRecord
from app.services.dataset import SyntheticDataset
from app.services.denoiser import Context, DenoiserParams, cfg_eps, eps_theta, save_adapters
from app.services.optimizer import AdamW, global_norm, lr_multiplier
from app.services.rewards import RewardFn, combine_rewards, to_unit_range
from app.services.sampler import SamplerSettings, sample
from app.services.schedule import NoiseSchedule
from app.utils.logger import get_logger
from app.utils.metrics import MetricsWriter
from app.utils.rng import KeyedRng

logger = get_logger(__name__)

Rewards = Sequence[Tuple[RewardFn, float]]
GradMap = Dict[str, Tensor]
EpsPredictor = Callable[[Tensor, List[Context], List[int]], Tensor]


# ---------------------------------------------------------------------------
# 사전학습
# ---------------------------------------------------------------------------

def pretrain_loss(
    predict: EpsPredictor,
    x0: np.ndarray,
    contexts: List[Context],
    steps: List[int],
    eps: np.ndarray,
    schedule: NoiseSchedule,
) -> Tensor:
    """‖ε − ε_θ(α_t·x0 + σ_t·ε, c, t)‖²의 원소 평균"""
    a = schedule.alphas[steps].reshape(-1, 1, 1, 1)
    s = schedule.sigmas[steps].reshape(-1, 1, 1, 1)
    x_t = Tensor(a * x0 + s * eps)
    pred = predict(x_t, contexts, steps)
    return mean(square(pred - Tensor(eps)))


def draw_pretrain_batch(
    x0: np.ndarray,
    labels: np.ndarray,
    schedule: NoiseSchedule,
    rng: KeyedRng,
    step: int,
    cond_drop: float,
) -> Tuple[List[Context], List[int], np.ndarray]:
    """t ~ U{1..n_train}, ε ~ N(0, I), 확률 cond_drop으로 c → ∅"""
    n = len(labels)
    steps = [rng.randint("pretrain-t", 1, schedule.n_train, step, i) for i in range(n)]
    drops = rng.uniform("pretrain-drop", (n,), step) < cond_drop
    contexts = [Context.null() if drop else Context(int(label)) for label, drop in zip(labels, drops)]
    eps = rng.normal("pretrain-eps", x0.shape, step)
    return contexts, steps, eps


def pretrain_step(
    params: DenoiserParams,
    opt: AdamW,
    x0: np.ndarray,
    labels: np.ndarray,
    schedule: NoiseSchedule,
    rng: KeyedRng,
    step: int,
    cond_drop: float = 0.1,
) -> MetricsRecord:
    """배치 하나로 base 가중치를 한 번 갱신 (x0는 모델 공간 [-1,1])"""
    started = time.perf_counter()
    contexts, steps, eps = draw_pretrain_batch(x0, labels, schedule, rng, step, cond_drop)
    params.set_base_trainable(True)
    with Tape() as tape:
        loss = pretrain_loss(lambda x, c, t: eps_theta(params, x, c, t), x0, contexts, steps, eps, schedule)
    loss_value = loss.item()
    if not np.isfinite(loss_value):
        raise NumericalError(f"사전학습 손실이 비유한 값입니다 (step {step})")
    grads = backward(tape, loss, params.base)
    norm, lr = opt.step(params.base, grads)
    return MetricsRecord(step=step, grad_norm=norm, loss=loss_value, lr=lr,
                         wall_ms=(time.perf_counter() - started) * 1000.0)


def pretrain(
    params: DenoiserParams,
    config: PretrainConfig,
    dataset: SyntheticDataset,
    schedule: NoiseSchedule,
    writer: Optional[MetricsWriter] = None,
) -> List[MetricsRecord]:
    """가중 ELBO 노이즈 예측 손실로 base 가중치 학습"""
    pool = np.flatnonzero(np.isin(dataset.labels, config.classes))
    if len(pool) == 0:
        raise ValidationError(f"선택한 클래스의 데이터가 없습니다: {config.classes}")
    rng = KeyedRng(config.seed)
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay, clip_norm=config.clip_norm, lr_decay=config.lr_decay)
    records: List[MetricsRecord] = []
    logger.info(f"🚀 [PRETRAIN] 시작: steps={config.steps}, batch={config.batch}, 데이터 {len(pool)}개")
    try:
        for step in range(1, config.steps + 1):
            idx = pool[rng.generator("pretrain-batch", step).integers(0, len(pool), size=config.batch)]
            x0 = dataset.images[idx].astype(np.float64) * 2.0 - 1.0
            record = pretrain_step(params, opt, x0, dataset.labels[idx], schedule, rng, step, config.cond_drop)
            records.append(record)
            if writer is not None:
                writer.write(record)
            if step % config.log_every == 0 or step == config.steps:
                recent = np.mean([r.loss for r in records[-config.log_every:] if r.loss is not None])
                logger.info(f"📈 [PRETRAIN] step {step}/{config.steps} loss={recent:.4f} |g|={record.grad_norm:.3f}")
    except NumericalError as e:
        logger.error(f"❌ [PRETRAIN] 수치 오류로 중단: {e}")
        raise
    finally:
        params.set_base_trainable(False)
    return records


# ---------------------------------------------------------------------------
# 보상 미세조정
# ---------------------------------------------------------------------------

def kl_from_eps(eps_ft: Tensor, eps_pre: Tensor, beta: float) -> Tensor:
    """β·‖ε_ft − ε_pre‖²"""
    return sum_(square(eps_ft - eps_pre)) * beta


def kl_penalty(
    params_ft: DenoiserParams,
    params_pre: DenoiserParams,
    x_1: Tensor,
    c: Context,
    t: int,
    guidance_w: float,
    beta: float,
) -> Tensor:
    """마지막 샘플러 스텝 입력 latent에서의 두 모델 ε 차이 (사전학습 모델 쪽은 상수)"""
    x_in = stop_grad(x_1)
    eps_ft = cfg_eps(params_ft, x_in, c, t, guidance_w)
    with no_grad():
        eps_pre = cfg_eps(params_pre, x_in, c, t, guidance_w)
    return kl_from_eps(eps_ft, Tensor(eps_pre.data), beta)


def sampler_settings_for(
    config: FinetuneConfig,
    rng: KeyedRng,
    step: int,
    index: int,
) -> SamplerSettings:
    """모드별 stop-gradient / 조기 종료 위치"""
    stop_grad_step: Optional[int] = None
    t_truncate: Optional[int] = None
    if config.mode == FinetuneMode.DRAFT_K:
        stop_grad_step = config.K
    elif config.mode == FinetuneMode.DRAFT_LV:
        stop_grad_step = 1
    elif config.mode == FinetuneMode.REFL:
        t_truncate = rng.randint("refl-truncate", 1, config.m, step, index)
    return SamplerSettings(
        guidance_w=config.guidance_w,
        stop_grad_step=stop_grad_step,
        t_truncate=t_truncate,
        checkpointing=config.checkpointing,
        on_grid=True,
    )


def _lv_terms(
    params: DenoiserParams,
    config: FinetuneConfig,
    x0: Tensor,
    c: Context,
    schedule: NoiseSchedule,
    rewards: Rewards,
    rng: KeyedRng,
    step: int,
    index: int,
    frozen_x0: Optional[np.ndarray] = None,
) -> Tensor:
    """Σ_j r(x̂0_j), x_1 = α₁·stop_grad(x0) + σ₁·ε_j, x̂0_j = (x_1 − σ₁·ε_θ(x_1))/α₁"""
    t1, _ = schedule.step_indices(1)
    a1, s1 = schedule.alpha(t1), schedule.sigma(t1)
    anchor = stop_grad(x0 if frozen_x0 is None else Tensor(frozen_x0))
    total: Optional[Tensor] = None
    for j in range(config.n):
        eps = Tensor(rng.normal(f"lv-eps/{index}", x0.shape, step, j))
        x1 = a1 * anchor + s1 * eps
        if config.lv_guidance:
            eps_hat = cfg_eps(params, x1, c, t1, config.guidance_w, schedule)
        else:
            eps_hat = eps_theta(params, x1, c, t1, schedule)
        xhat0 = (x1 - s1 * eps_hat) / a1
        r_j, _ = combine_rewards(rewards, to_unit_range(xhat0), c)
        total = r_j if total is None else total + r_j
    assert total is not None
    return total


def _draw_x_T(params: DenoiserParams, rng: KeyedRng, step: int, index: int) -> Tensor:
    size = params.spec.image_size
    return Tensor(rng.normal("x_T", (3, size, size), step, index))


def frozen_inputs(
    params: DenoiserParams,
    config: FinetuneConfig,
    c: Context,
    schedule: NoiseSchedule,
    rng: KeyedRng,
    step: int,
    index: int,
) -> Dict[str, np.ndarray]:
    """현재 파라미터에서 stop_grad 지점 값을 계산 (cut: 잘린 스텝 입력 latent, x0: LV 기준 샘플)

    유한 차분에서 이 값을 고정하면 잘린 목적함수 자체를 미분하게 된다.
    """
    settings = sampler_settings_for(config, rng, step, index)
    with no_grad():
        trace = sample(params, c, _draw_x_T(params, rng, step, index), schedule, settings)
    frozen: Dict[str, np.ndarray] = {}
    cuts = [v for v in (settings.stop_grad_step, settings.t_truncate) if v is not None]
    if cuts:
        cutoff = min(cuts)
        latent = trace.latents[cutoff]
        assert latent is not None
        frozen["cut"] = latent.data.copy()
    if config.mode == FinetuneMode.DRAFT_LV:
        frozen["x0"] = trace.x0.data.copy()
    return frozen


def example_objective(
    params: DenoiserParams,
    config: FinetuneConfig,
    c: Context,
    schedule: NoiseSchedule,
    rewards: Rewards,
    rng: KeyedRng,
    step: int,
    index: int,
    pretrained: Optional[DenoiserParams] = None,
    frozen: Optional[Mapping[str, np.ndarray]] = None,
) -> Tuple[Tensor, float, Dict[str, float], Optional[float]]:
    """현재 테이프 위에 배치 원소 하나의 목적함수를 기록. (목적함수, r(x0), 보상별 값, KL)

    frozen은 frozen_inputs의 결과로, stop_grad 지점을 그 값으로 고정한다.
    """
    frozen = frozen or {}
    x_T = _draw_x_T(params, rng, step, index)
    settings = sampler_settings_for(config, rng, step, index)
    cut = Tensor(frozen["cut"]) if "cut" in frozen else None
    trace = sample(params, c, x_T, schedule, settings, cut_latent=cut)
    reward, parts = combine_rewards(rewards, to_unit_range(trace.x0), c)
    objective = -reward
    if config.mode == FinetuneMode.DRAFT_LV and config.n > 0:
        lv = _lv_terms(params, config, trace.x0, c, schedule, rewards, rng, step, index, frozen.get("x0"))
        objective = objective - lv
        if config.normalize_lv:
            objective = objective * (1.0 / (config.n + 1))
    kl_value: Optional[float] = None
    if config.beta_kl > 0:
        if pretrained is None:
            raise ValidationError("beta_kl > 0에는 사전학습 모델이 필요합니다")
        t_final, _ = schedule.step_indices(trace.final_step)
        kl = kl_penalty(params, pretrained, trace.final_input, c, t_final, config.guidance_w, config.beta_kl)
        kl_value = kl.item()
        objective = objective + kl
    return objective, reward.item(), parts, kl_value


def reward_grad_step(
    params: DenoiserParams,
    config: FinetuneConfig,
    contexts: Sequence[Context],
    schedule: NoiseSchedule,
    rewards: Rewards,
    rng: KeyedRng,
    step: int,
    pretrained: Optional[DenoiserParams] = None,
) -> Tuple[GradMap, MetricsRecord]:
    """배치 평균 어댑터 기울기와 지표 (grad_norm은 클리핑 전)"""
    if not contexts:
        raise ValidationError("배치가 비어 있습니다")
    started = time.perf_counter()
    trainable = params.trainable()
    if not trainable:
        raise ValidationError("미세조정할 어댑터가 없습니다")

    summed: Dict[str, np.ndarray] = {}
    rewards_seen: List[float] = []
    objectives: List[float] = []
    kls: List[float] = []
    parts_sum: Dict[str, float] = {}
    for i, c in enumerate(contexts):
        with Tape() as tape:
            objective, r, parts, kl = example_objective(params, config, c, schedule, rewards, rng, step, i, pretrained)
        objectives.append(objective.item())
        grads = backward(tape, objective, trainable)
        for name in trainable:
            g = grads[name].data
            summed[name] = g if name not in summed else summed[name] + g
        rewards_seen.append(r)
        for k, v in parts.items():
            parts_sum[k] = parts_sum.get(k, 0.0) + v
        if kl is not None:
            kls.append(kl)

    inv = 1.0 / len(contexts)
    averaged = {name: Tensor(summed[name] * inv) for name in trainable}
    norm = global_norm(averaged)
    if not np.isfinite(norm):
        logger.error(f"❌ [FINETUNE] step {step}: 비유한 기울기")
        raise NumericalError(f"비유한 기울기 (step {step})")
    record = MetricsRecord(
        step=step,
        reward_mean=float(np.mean(rewards_seen)),
        reward_std=float(np.std(rewards_seen)),
        grad_norm=norm,
        loss=float(np.mean(objectives)),
        lr=config.lr * lr_multiplier(step, config.lr_decay),
        rewards={k: v * inv for k, v in sorted(parts_sum.items())},
        kl=float(np.mean(kls)) if kls else None,
        wall_ms=(time.perf_counter() - started) * 1000.0,
    )
    return averaged, record


def draw_contexts(classes: Sequence[int], batch: int, rng: KeyedRng, step: int, tag: str = "prompts") -> List[Context]:
    picks = rng.generator(tag, step).integers(0, len(classes), size=batch)
    return [Context(int(classes[p])) for p in picks]


def finetune(
    params: DenoiserParams,
    config: FinetuneConfig,
    schedule: NoiseSchedule,
    rewards: Rewards,
    writer: Optional[MetricsWriter] = None,
    pretrained: Optional[DenoiserParams] = None,
    snapshot_dir: Optional[Path] = None,
) -> List[MetricsRecord]:
    """미세조정 루프: 기울기 → 클리핑 → AdamW (어댑터만 갱신)"""
    rng = KeyedRng(config.seed)
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay, clip_norm=config.clip_norm, lr_decay=config.lr_decay)
    records: List[MetricsRecord] = []
    mode = config.mode.value if isinstance(config.mode, FinetuneMode) else str(config.mode)
    logger.info(
        f"🚀 [FINETUNE] 시작: mode={mode}, K={config.K}, m={config.m}, n={config.n}, "
        f"steps={config.steps}, batch={config.batch}, w={config.guidance_w}"
    )
    for step in range(1, config.steps + 1):
        contexts = draw_contexts(config.classes, config.batch, rng, step)
        try:
            grads, record = reward_grad_step(params, config, contexts, schedule, rewards, rng, step, pretrained)
        except NumericalError as e:
            logger.error(f"❌ [FINETUNE] step {step} 수치 오류: {e}")
            raise
        _, lr = opt.step(params.trainable(), grads)
        record = record.model_copy(update={"lr": lr})
        records.append(record)
        if writer is not None:
            writer.write(record)
        if step % config.log_every == 0 or step == config.steps:
            window = records[-config.log_every:]
            mean_r = np.mean([r.reward_mean for r in window if r.reward_mean is not None])
            logger.info(f"📈 [FINETUNE] step {step}/{config.steps} reward={mean_r:.4f} |g|={record.grad_norm:.3f}")
        if snapshot_dir is not None and config.save_every and step % config.save_every == 0:
            save_adapters(str(snapshot_dir / f"adapters_step{step:05d}.ckpt"), params, {"step": step})
    return records


def reward_trend(records: Sequence[MetricsRecord], window: int = 100) -> Tuple[float, float, float]:
    """(처음 window 평균, 마지막 window 평균, 차이 / 표준오차)"""
    values = np.array([r.reward_mean for r in records if r.reward_mean is not None], dtype=np.float64)
    if len(values) < 2:
        raise ValidationError("추세를 계산할 스텝이 부족합니다")
    w = max(1, min(window, len(values) // 2))
    first, last = values[:w], values[-w:]
    se = np.sqrt(first.var(ddof=1) / w + last.var(ddof=1) / w) if w > 1 else 0.0
    diff = float(last.mean() - first.mean())
    if se > 0:
        z = diff / se
    else:
        z = 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return float(first.mean()), float(last.mean()), z
