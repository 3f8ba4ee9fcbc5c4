"""초기 latent x_T 최적화 (DOODL 방식 baseline)

모델 파라미터는 고정하고 전체 샘플링 체인을 역전파해 x_T만 Adam으로 올린다.
매 갱신 후 ‖x_T‖ = sqrt(dim)으로 다시 맞춘다.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from app.core.errors import NumericalError
from app.core.tensor import Tape, Tensor, backward, get_dtype, no_grad
from app.services.denoiser import Context, DenoiserParams
from app.services.finetune import Rewards
from app.services.optimizer import AdamW
from app.services.rewards import combine_rewards, to_unit_range
from app.services.sampler import SampleTrace, SamplerSettings, sample
from app.services.schedule import NoiseSchedule
from app.utils.logger import get_logger

logger = get_logger(__name__)

LATENT_NAME = "x_T"


def renormalize(x: np.ndarray) -> np.ndarray:
    """‖x‖ = sqrt(x.size)"""
    norm = float(np.linalg.norm(x))
    if norm == 0.0 or not math.isfinite(norm):
        raise NumericalError(f"latent 노름을 맞출 수 없습니다: {norm}")
    return np.asarray(x * (math.sqrt(x.size) / norm), dtype=get_dtype())


@dataclass
class LatentOptState:
    x_T: Tensor
    optimizer: AdamW
    step: int = 0
    rewards: List[float] = field(default_factory=list)
    best_reward: float = -math.inf
    best_x_T: Optional[np.ndarray] = None


def _reward_and_grad(
    params: DenoiserParams,
    c: Context,
    x_T: Tensor,
    schedule: NoiseSchedule,
    rewards: Rewards,
    settings: SamplerSettings,
) -> Tuple[float, np.ndarray]:
    with Tape() as tape:
        trace = sample(params, c, x_T, schedule, settings)
        reward, _ = combine_rewards(rewards, to_unit_range(trace.x0), c)
    value = reward.item()
    if not math.isfinite(value):
        raise NumericalError("비유한 보상")
    grad = backward(tape, reward, {LATENT_NAME: x_T})[LATENT_NAME].data
    if not np.isfinite(grad).all():
        logger.error("❌ [DOODL] x_T 기울기에 NaN/Inf")
        raise NumericalError("비유한 x_T 기울기")
    return value, grad


def final_sample(
    params: DenoiserParams,
    c: Context,
    x_T: np.ndarray,
    schedule: NoiseSchedule,
    rewards: Rewards,
    guidance_w: float,
) -> Tuple[SampleTrace, float]:
    with no_grad():
        trace = sample(params, c, Tensor(x_T), schedule, SamplerSettings(guidance_w=guidance_w, checkpointing=False))
        reward, _ = combine_rewards(rewards, to_unit_range(trace.x0), c)
    return trace, reward.item()


def doodl_optimize(
    params: DenoiserParams,
    c: Context,
    x_T_init: np.ndarray,
    schedule: NoiseSchedule,
    rewards: Rewards,
    steps: int = 20,
    lr: float = 0.05,
    guidance_w: float = 7.5,
) -> Tuple[np.ndarray, SampleTrace, List[float]]:
    """(보상이 가장 높았던 x_T, 그 샘플 궤적, 반복별 보상 곡선)

    곡선의 i번째 값은 i번 갱신한 latent의 보상이다 (0번째는 초기값).
    """
    settings = SamplerSettings(guidance_w=guidance_w, checkpointing=True)
    x0 = np.asarray(x_T_init, dtype=get_dtype())
    state = LatentOptState(
        x_T=Tensor(x0.copy(), requires_grad=True, name=LATENT_NAME),
        optimizer=AdamW(lr=lr, weight_decay=0.0, clip_norm=math.inf),
    )
    logger.info(f"🚀 [DOODL] 시작: class={c.class_id}, steps={steps}, lr={lr}")

    for i in range(steps + 1):
        if i < steps:
            value, grad = _reward_and_grad(params, c, state.x_T, schedule, rewards, settings)
        else:
            _, value = final_sample(params, c, state.x_T.data, schedule, rewards, guidance_w)
            grad = None
        state.rewards.append(value)
        if value > state.best_reward:
            state.best_reward = value
            state.best_x_T = state.x_T.data.copy()
        if grad is None:
            break
        # 보상 상승: −∇r로 최소화
        state.optimizer.step({LATENT_NAME: state.x_T}, {LATENT_NAME: Tensor(-grad)})
        state.x_T.data = renormalize(state.x_T.data)
        state.step += 1
        logger.debug(f"📈 [DOODL] iter {state.step}/{steps} reward={value:.4f}")

    assert state.best_x_T is not None
    trace, best = final_sample(params, c, state.best_x_T, schedule, rewards, guidance_w)
    logger.info(f"✅ [DOODL] 완료: {state.rewards[0]:.4f} → 최고 {best:.4f}")
    return state.best_x_T, trace, state.rewards
