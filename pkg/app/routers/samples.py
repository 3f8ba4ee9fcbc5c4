"""샘플 생성 라우터 (읽기 전용, 학습 없음)"""

import base64
from functools import lru_cache
from typing import Optional, Tuple

from fastapi import APIRouter

from app.core.tensor import Tensor, no_grad
from app.schemas.api import SampleRequest, SampleResponse
from app.schemas.config import RewardOptions
from app.services.denoiser import Context, DenoiserParams, lora_scale_set
from app.services.pipeline import load_model, pool_latent
from app.services.rewards import build_rewards, evaluate_rewards, to_unit_range
from app.services.sampler import SamplerSettings, sample
from app.services.schedule import NoiseSchedule
from app.utils.images import encode_ppm
from app.utils.logger import get_logger

router = APIRouter(prefix="/api/v1", tags=["Samples"])
logger = get_logger(__name__)


@lru_cache(maxsize=8)
def _cached_model(checkpoint: str, adapters: Optional[str], sampler_steps: int) -> Tuple[DenoiserParams, NoiseSchedule]:
    return load_model(checkpoint, sampler_steps, adapters)


@router.post("/samples", response_model=SampleResponse)
def create_sample(request: SampleRequest) -> SampleResponse:
    """고정 seed pool의 x_T에서 DDIM 샘플 한 장과 보상 점수"""
    logger.info(f"🖼️ [API_SAMPLE] class={request.class_id}, seed={request.seed}, α={request.lora_scale}")
    params, schedule = _cached_model(request.checkpoint, request.adapters, request.sampler_steps)
    params = lora_scale_set(params, request.lora_scale)
    x_T = Tensor(pool_latent(request.seed, params.spec, request.class_id, 0))
    settings = SamplerSettings(guidance_w=request.guidance_w, checkpointing=False)
    with no_grad():
        trace = sample(params, Context(request.class_id), x_T, schedule, settings)
    image = to_unit_range(trace.x0).data
    rewards = build_rewards(RewardOptions(rewards=request.rewards))
    scores = evaluate_rewards(rewards, image, Context(request.class_id))
    return SampleResponse(
        image_ppm_base64=base64.b64encode(encode_ppm(image)).decode("ascii"),
        class_id=request.class_id,
        seed=request.seed,
        rewards=scores,
    )
