"""실행 기록 스키마: 스텝별 지표, 평가 요약, 실행 매니페스트"""

import math
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, field_validator


class MetricsRecord(BaseModel):
    """옵티마이저 스텝 하나의 지표 (metrics.jsonl 한 줄)"""
    step: int = Field(..., ge=0)
    reward_mean: Optional[float] = None
    reward_std: Optional[float] = None
    grad_norm: float = Field(..., description="클리핑 전 전역 기울기 노름")
    loss: Optional[float] = Field(None, description="사전학습 손실 / 미세조정 목적함수")
    lr: float
    rewards: Dict[str, float] = Field(default_factory=dict, description="보상별 배치 평균")
    kl: Optional[float] = None
    wall_ms: Optional[float] = Field(None, description="timings.jsonl에만 기록")

    @field_validator("reward_mean", "reward_std", "grad_norm", "loss", "lr", "kl")
    @classmethod
    def _finite(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not math.isfinite(v):
            raise ValueError(f"비유한 지표 값: {v}")
        return v


class RewardSummary(BaseModel):
    mean: float
    std: float
    n: int


class EvalSummary(BaseModel):
    """eval_model 결과"""
    n_samples: int
    seed_pool: int
    overall: Dict[str, RewardSummary]
    per_class: Dict[str, Dict[str, RewardSummary]]
    combined: RewardSummary


class KDiagRow(BaseModel):
    """K 진단 표 한 행"""
    K: int
    grad_norm: float
    median_grad_norm: Optional[float] = None
    angle_to_k1: Optional[float] = Field(None, description="라디안, 영벡터면 None")


class ClipAblationRow(BaseModel):
    K: int
    clip_norm: float
    final_reward: float
    first_reward: float


class VarianceRow(BaseModel):
    """같은 재추출 키에서 DRaFT-LV(n+1로 나눈 평균)와 DRaFT-1 기울기 분산 비교"""
    n: int
    resamples: int
    lv: float
    draft_1: float
    ratio: Optional[float] = Field(None, description="draft_1 / lv (lv = 0이면 None)")
    reduced: bool = Field(description="lv < draft_1 이 관측되었는지")


class RunManifest(BaseModel):
    """실행 재현 정보 (manifest.json)"""
    command: str
    version: str
    seed: int
    precision: str
    config: Dict[str, Any]
    checkpoints: Dict[str, str] = Field(default_factory=dict)
    digests: Dict[str, str] = Field(default_factory=dict)
    metrics_path: Optional[str] = None
    outputs: List[str] = Field(default_factory=list)
    git_describe: str = "unknown"
