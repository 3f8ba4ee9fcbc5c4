"""HTTP 요청/응답 스키마"""

from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.schemas.config import N_CLASSES, RewardSpec, parse_reward_list


class SampleRequest(BaseModel):
    """샘플 한 장 생성 요청"""
    model_config = ConfigDict(extra="forbid")

    checkpoint: str = Field(..., description="denoiser 체크포인트 경로")
    adapters: Optional[str] = Field(None, description="LoRA 어댑터 체크포인트 경로")
    class_id: int = Field(..., ge=0, lt=N_CLASSES, description="조건 클래스")
    seed: int = Field(0, description="x_T seed")
    guidance_w: float = Field(7.5, ge=0, description="guidance 가중치")
    sampler_steps: int = Field(50, ge=1, le=1000, description="DDIM 스텝 수")
    lora_scale: float = Field(1.0, description="어댑터 배율 α")
    rewards: List[RewardSpec] = Field(default_factory=lambda: [RewardSpec(name="jpeg")], description="평가 보상")

    @field_validator("rewards", mode="before")
    @classmethod
    def _parse_rewards(cls, v: object) -> object:
        return parse_reward_list(v)


class SampleResponse(BaseModel):
    image_ppm_base64: str = Field(..., description="P6 PPM (base64)")
    class_id: int
    seed: int
    rewards: Dict[str, float] = Field(..., description="보상별 점수 (combined 포함)")


class RewardRequest(BaseModel):
    """이미지 점수 요청"""
    model_config = ConfigDict(extra="forbid")

    image_ppm_base64: str = Field(..., description="P6 PPM (base64)")
    class_id: int = Field(0, ge=0, lt=N_CLASSES)
    rewards: List[RewardSpec] = Field(default_factory=lambda: [RewardSpec(name="jpeg")])
    jpeg_quality: int = Field(50, ge=10, le=95)
    classifier_checkpoint: Optional[str] = None
    scorer_checkpoint: Optional[str] = None
    target_class: Optional[int] = Field(None, ge=0, lt=N_CLASSES)

    @field_validator("rewards", mode="before")
    @classmethod
    def _parse_rewards(cls, v: object) -> object:
        return parse_reward_list(v)


class RewardResponse(BaseModel):
    rewards: Dict[str, float]
