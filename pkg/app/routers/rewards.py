"""이미지 보상 점수 라우터"""

import base64
import binascii

from fastapi import APIRouter, HTTPException, status

from app.core.errors import ValidationError
from app.schemas.api import RewardRequest, RewardResponse
from app.schemas.config import RewardOptions
from app.services.denoiser import Context
from app.services.rewards import build_rewards, evaluate_rewards
from app.utils.images import decode_ppm

router = APIRouter(prefix="/api/v1", tags=["Rewards"])


@router.post("/rewards", response_model=RewardResponse)
def score_image(request: RewardRequest) -> RewardResponse:
    """PPM 이미지 한 장의 보상별 점수"""
    try:
        blob = base64.b64decode(request.image_ppm_base64, validate=True)
    except (binascii.Error, ValueError) as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=f"base64 디코딩 실패: {e}")
    image = decode_ppm(blob)
    if image.shape[1] % 8 or image.shape[2] % 8:
        raise ValidationError(f"이미지 크기는 8의 배수여야 합니다: {image.shape[1]}×{image.shape[2]}")
    options = RewardOptions(
        rewards=request.rewards,
        jpeg_quality=request.jpeg_quality,
        classifier_checkpoint=request.classifier_checkpoint,
        scorer_checkpoint=request.scorer_checkpoint,
        target_class=request.target_class,
    )
    return RewardResponse(rewards=evaluate_rewards(build_rewards(options), image, Context(request.class_id)))
