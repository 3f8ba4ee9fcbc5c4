"""DDIM 샘플러 (stop-gradient 위치 지정, 스텝별 체크포인팅), ancestral 샘플러, LoRA 구간 샘플링

샘플러 스텝 k는 스케줄 인덱스 (grid[k], grid[k-1])를 쓰고, k = S..1 순서로 진행한다.
"""

import math
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np

from app.core.checkpoint import checkpoint_segment
from app.core.errors import NumericalError, ValidationError
from app.core.tensor import Tensor, no_grad, stop_grad
from app.services.denoiser import Context, DenoiserParams, cfg_eps
from app.services.schedule import NoiseSchedule
from app.utils.logger import get_logger
from app.utils.rng import KeyedRng

logger = get_logger(__name__)


@dataclass(frozen=True)
class SamplerSettings:
    """샘플링 한 번의 설정

    stop_grad_step: DRaFT-K의 K (이 스텝에 들어가는 latent에 stop_grad)
    t_truncate: ReFL 조기 종료 스텝 (그 스텝의 x̂0를 x0로 반환)
    """
    guidance_w: float = 7.5
    stop_grad_step: Optional[int] = None
    t_truncate: Optional[int] = None
    checkpointing: bool = True
    on_grid: bool = False


@dataclass
class SampleTrace:
    """latent 궤적 x[S..0]과 스텝별 한 단계 예측 x̂0"""
    latents: List[Optional[Tensor]]
    xhat0_per_step: List[Optional[Tensor]]
    stop_grad_step: Optional[int]
    guidance_w: float
    t_truncate: Optional[int] = None
    final_step: int = 1
    steps_run: List[int] = field(default_factory=list)

    @property
    def x0(self) -> Tensor:
        x0 = self.latents[0]
        assert x0 is not None
        return x0

    @property
    def x_T(self) -> Tensor:
        x_T = self.latents[-1]
        assert x_T is not None
        return x_T

    @property
    def final_input(self) -> Tensor:
        """마지막으로 실행된 스텝의 입력 latent (KL 항 평가 위치)"""
        x = self.latents[self.final_step]
        assert x is not None
        return x


def _check_finite(t: Tensor, what: str, k: int) -> None:
    if not np.isfinite(t.data).all():
        logger.error(f"❌ [SAMPLER] step {k}: {what}에 NaN/Inf")
        raise NumericalError(f"샘플러 스텝 {k}에서 비유한 {what}")


def ddim_step(
    params: DenoiserParams,
    x_t: Tensor,
    c: Context,
    k: int,
    w: float,
    schedule: NoiseSchedule,
    on_grid: bool = False,
) -> Tuple[Tensor, Tensor]:
    """x̂0 = (x_t − σ_t·ε)/α_t, x_{k−1} = α_{t−1}·x̂0 + σ_{t−1}·ε (ε는 한 번만 계산)"""
    t, t_prev = schedule.step_indices(k)
    eps = cfg_eps(params, x_t, c, t, w, schedule if on_grid else None)
    _check_finite(eps, "ε", k)
    xhat0 = (x_t - schedule.sigma(t) * eps) / schedule.alpha(t)
    _check_finite(xhat0, "x̂0", k)
    x_prev = schedule.alpha(t_prev) * xhat0 + schedule.sigma(t_prev) * eps
    return x_prev, xhat0


def _run_step(
    params: DenoiserParams,
    x: Tensor,
    c: Context,
    k: int,
    schedule: NoiseSchedule,
    settings: SamplerSettings,
) -> Tuple[Tensor, Tensor]:
    def step(x_in: Tensor) -> Tuple[Tensor, Tensor]:
        return ddim_step(params, x_in, c, k, settings.guidance_w, schedule, settings.on_grid)

    if settings.checkpointing:
        out = checkpoint_segment(step, x)
        assert isinstance(out, tuple)
        return out[0], out[1]
    return step(x)


def validate_settings(settings: SamplerSettings, n_steps: int) -> None:
    K = settings.stop_grad_step
    if K is not None and not 1 <= K <= n_steps:
        raise ValidationError(f"stop_grad_step K는 1..S 범위여야 합니다: K={K}, S={n_steps}")
    tt = settings.t_truncate
    if tt is not None and not 1 <= tt <= n_steps:
        raise ValidationError(f"t_truncate는 1..S 범위여야 합니다: {tt}, S={n_steps}")


def sample(
    params: DenoiserParams,
    c: Context,
    x_T: Tensor,
    schedule: NoiseSchedule,
    settings: SamplerSettings = SamplerSettings(),
    cut_latent: Optional[Tensor] = None,
) -> SampleTrace:
    """DDIM 샘플링 한 번

    K가 주어지면 K보다 큰 스텝은 기록 없이 진행하고 K 스텝 입력에 stop_grad를 둔다.
    t_truncate가 주어지면 그 스텝 입력에 stop_grad를 두고 x̂0를 x0로 반환한 뒤 끝낸다.
    cut_latent가 주어지면 앞 스텝은 건너뛰고 그 값을 잘린 스텝의 입력으로 쓴다.
    """
    n_steps = schedule.sampler_steps
    validate_settings(settings, n_steps)
    K, tt = settings.stop_grad_step, settings.t_truncate
    cutoff = min(v for v in (K, tt, n_steps) if v is not None)
    truncated = K is not None or tt is not None
    if cut_latent is not None and not truncated:
        raise ValidationError("cut_latent는 stop_grad_step이나 t_truncate와 함께 써야 합니다")

    latents: List[Optional[Tensor]] = [None] * (n_steps + 1)
    xhats: List[Optional[Tensor]] = [None] * (n_steps + 1)
    latents[n_steps] = x_T
    trace = SampleTrace(latents, xhats, K, settings.guidance_w, tt)

    x = x_T
    for k in range(n_steps, 0, -1):
        trace.steps_run.append(k)
        trace.final_step = k
        if k > cutoff and cut_latent is not None:
            continue
        if k > cutoff:
            with no_grad():
                x_prev, xhat0 = ddim_step(params, x, c, k, settings.guidance_w, schedule, settings.on_grid)
            xhats[k] = xhat0
            x = x_prev
            latents[k - 1] = x
            continue
        if k == cutoff and truncated:
            x = stop_grad(cut_latent if cut_latent is not None else x)
            latents[k] = x
        x_prev, xhat0 = _run_step(params, x, c, k, schedule, settings)
        xhats[k] = xhat0
        if tt is not None and k == tt:
            latents[0] = xhat0
            break
        x = x_prev
        latents[k - 1] = x
    return trace


def ancestral_sample(
    params: DenoiserParams,
    c: Context,
    x_T: Tensor,
    schedule: NoiseSchedule,
    rng: KeyedRng,
    guidance_w: float = 7.5,
    eta: float = 1.0,
    inject_noise: bool = True,
    index: int = 0,
) -> SampleTrace:
    """DDPM식 확률적 갱신 (평가 전용, 기울기 미지원)

    x_s = α_s·x̂0 + sqrt(σ_s² − σ_η²)·ε + σ_η·z,  σ_η = η·sqrt(σ_s²/σ_t² · (1 − α_t²/α_s²))
    η = 0이면 DDIM과 같은 갱신이다.
    """
    n_steps = schedule.sampler_steps
    latents: List[Optional[Tensor]] = [None] * (n_steps + 1)
    xhats: List[Optional[Tensor]] = [None] * (n_steps + 1)
    latents[n_steps] = x_T
    trace = SampleTrace(latents, xhats, None, guidance_w)

    x = x_T
    with no_grad():
        for k in range(n_steps, 0, -1):
            t, s = schedule.step_indices(k)
            a_t, sig_t = schedule.alpha(t), schedule.sigma(t)
            a_s, sig_s = schedule.alpha(s), schedule.sigma(s)
            eps = cfg_eps(params, x, c, t, guidance_w)
            xhat0 = (x - sig_t * eps) / a_t
            sig_eta = eta * math.sqrt(max(sig_s ** 2 / sig_t ** 2 * (1.0 - a_t ** 2 / a_s ** 2), 0.0))
            if sig_eta == 0.0:
                x = a_s * xhat0 + sig_s * eps
            else:
                x = a_s * xhat0 + math.sqrt(max(sig_s ** 2 - sig_eta ** 2, 0.0)) * eps
                if inject_noise:
                    x = x + sig_eta * Tensor(rng.normal("ancestral", x.shape, step=k, index=index))
            _check_finite(x, "latent", k)
            xhats[k] = xhat0
            latents[k - 1] = x
            trace.steps_run.append(k)
    return trace


def lora_window_sample(
    params: DenoiserParams,
    c: Context,
    x_T: Tensor,
    schedule: NoiseSchedule,
    window: Literal["start", "end"],
    M: int,
    guidance_w: float = 7.5,
) -> SampleTrace:
    """어댑터를 샘플러 스텝 일부에만 적용

    start: 마지막 M 스텝(k ≤ M)에만, end: 처음 M 스텝(k > S − M)에만 적용하고 나머지는 base.
    """
    n_steps = schedule.sampler_steps
    if not 0 <= M <= n_steps:
        raise ValidationError(f"LoRA 구간 M은 0..S 범위여야 합니다: M={M}, S={n_steps}")
    if window not in ("start", "end"):
        raise ValidationError(f"알 수 없는 window 모드: {window}")
    adapted = params.merged_form()
    base = params.base_only()

    latents: List[Optional[Tensor]] = [None] * (n_steps + 1)
    xhats: List[Optional[Tensor]] = [None] * (n_steps + 1)
    latents[n_steps] = x_T
    trace = SampleTrace(latents, xhats, None, guidance_w)
    x = x_T
    with no_grad():
        for k in range(n_steps, 0, -1):
            in_window = k <= M if window == "start" else k > n_steps - M
            x, xhat0 = ddim_step(adapted if in_window else base, x, c, k, guidance_w, schedule)
            xhats[k] = xhat0
            latents[k - 1] = x
            trace.steps_run.append(k)
    return trace
