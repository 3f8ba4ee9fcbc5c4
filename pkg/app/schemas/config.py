"""실행 설정 스키마 (key = value 설정 파일과 1:1 대응)"""

from enum import Enum
from typing import Any, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

REWARD_NAMES = ("jpeg", "incompressibility", "classifier", "rotation", "scorer")
N_CLASSES = 8


class FinetuneMode(str, Enum):
    """보상 미세조정 모드"""
    DRAFT = "draft"  # 전체 체인 역전파
    DRAFT_K = "draft_k"  # 마지막 K 스텝만 역전파
    DRAFT_LV = "draft_lv"  # DRaFT-1 + n개 재노이즈 항
    REFL = "refl"  # 임의 스텝에서 조기 종료 후 one-step 예측


class RewardSpec(BaseModel):
    """보상 이름과 선형 결합 가중치"""
    name: Literal["jpeg", "incompressibility", "classifier", "rotation", "scorer"]
    weight: float = Field(1.0, description="선형 결합 가중치")


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def parse_reward_list(value: Any) -> Any:
    """'jpeg:2.0,rotation:0.5' → [RewardSpec, ...]"""
    if isinstance(value, str):
        specs = []
        for item in _split_list(value):
            name, _, weight = item.partition(":")
            specs.append({"name": name.strip(), "weight": float(weight) if weight else 1.0})
        return specs
    return value


class RunConfig(BaseModel):
    """모든 서브커맨드 설정의 공통 부분 (알 수 없는 키는 오류)"""
    model_config = ConfigDict(extra="forbid", use_enum_values=False)

    seed: int = Field(0, description="run seed (--seed가 우선)")


class ArchitectureConfig(BaseModel):
    """denoiser 구조 (체크포인트 헤더에 저장)"""
    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(24, ge=8, description="정사각형 이미지 한 변 (8의 배수)")
    channels: int = Field(32, ge=1, description="residual block 채널 수")
    n_blocks: int = Field(4, ge=1, description="residual block 수")
    emb_dim: int = Field(32, ge=2, description="시간/클래스 임베딩 차원")
    n_classes: int = Field(N_CLASSES, ge=1, description="조건 클래스 수 (∅ 토큰 제외)")

    @field_validator("image_size")
    @classmethod
    def _multiple_of_8(cls, v: int) -> int:
        if v % 8:
            raise ValueError(f"image_size는 8의 배수여야 합니다: {v}")
        return v


class SamplingOptions(RunConfig):
    """샘플링 공통 옵션"""
    guidance_w: float = Field(7.5, ge=0.0, description="classifier-free guidance 가중치")
    sampler_steps: int = Field(50, ge=1, description="DDIM 샘플러 스텝 수 S")
    checkpointing: bool = Field(True, description="샘플러 스텝별 gradient checkpointing")


class RewardOptions(BaseModel):
    """보상 함수 공통 옵션"""
    rewards: List[RewardSpec] = Field(default_factory=lambda: [RewardSpec(name="jpeg")])
    jpeg_quality: int = Field(50, ge=10, le=95, description="JPEG 품질 q")
    jpeg_rounding: Literal["exact", "ste", "poly"] = Field("exact", description="양자화 반올림 역전파 방식")
    scorer_checkpoint: Optional[str] = Field(None, description="toy 점수 모델 체크포인트")
    classifier_checkpoint: Optional[str] = Field(None, description="toy 분류기 체크포인트")
    target_class: Optional[int] = Field(None, ge=0, lt=N_CLASSES, description="분류기 보상 목표 클래스")

    @field_validator("rewards", mode="before")
    @classmethod
    def _parse_rewards(cls, v: Any) -> Any:
        return parse_reward_list(v)

    @model_validator(mode="after")
    def _reward_dependencies(self) -> "RewardOptions":
        names = {r.name for r in self.rewards}
        if "classifier" in names and (self.classifier_checkpoint is None or self.target_class is None):
            raise ValueError("classifier 보상에는 classifier_checkpoint와 target_class가 필요합니다")
        if "scorer" in names and self.scorer_checkpoint is None:
            raise ValueError("scorer 보상에는 scorer_checkpoint가 필요합니다")
        return self


class ClassListMixin(BaseModel):
    classes: List[int] = Field(default_factory=lambda: list(range(N_CLASSES)), description="조건 클래스 목록")

    @field_validator("classes", mode="before")
    @classmethod
    def _parse_classes(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("classes")
    @classmethod
    def _check_classes(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("classes가 비어 있습니다")
        for c in v:
            if not 0 <= c < N_CLASSES:
                raise ValueError(f"클래스 범위 초과: {c}")
        return v


class DatasetSourceMixin(BaseModel):
    dataset: Optional[str] = Field(None, description="gen-dataset의 dataset.ckpt (없으면 seed로 새로 생성)")


class DatasetConfig(RunConfig):
    """gen-dataset 설정"""
    dataset_size: int = Field(8000, ge=8, description="이미지 수 N")
    image_size: int = Field(24, ge=8)
    preview: int = Field(16, ge=0, description="미리보기 그리드 이미지 수")


class PretrainConfig(RunConfig, ClassListMixin, DatasetSourceMixin):
    """pretrain 설정 (가중 ELBO 노이즈 예측 손실)"""
    dataset_size: int = Field(8000, ge=8)
    steps: int = Field(4000, ge=1)
    batch: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    clip_norm: float = Field(1.0, gt=0)
    lr_decay: bool = False
    cond_drop: float = Field(0.1, ge=0, le=1, description="조건을 ∅로 바꾸는 확률")
    n_train: int = Field(1000, ge=1, description="학습 이산화 단계 수")
    sampler_steps: int = Field(50, ge=1)
    log_every: int = Field(50, ge=1)
    image_size: int = 24
    channels: int = 32
    n_blocks: int = 4
    emb_dim: int = 32

    def architecture(self) -> ArchitectureConfig:
        return ArchitectureConfig(
            image_size=self.image_size,
            channels=self.channels,
            n_blocks=self.n_blocks,
            emb_dim=self.emb_dim,
        )


class ToyTrainConfig(RunConfig, DatasetSourceMixin):
    """train-scorer / train-classifier 공통 설정"""
    dataset_size: int = Field(4000, ge=8)
    steps: int = Field(1500, ge=1)
    batch: int = Field(32, ge=1)
    lr: float = Field(2e-3, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    channels: int = Field(16, ge=1)
    image_size: int = 24
    blank_fraction: float = Field(0.1, ge=0, le=1, description="전경 없는 빈 이미지 비율 (scorer)")
    log_every: int = Field(100, ge=1)


class FinetuneConfig(SamplingOptions, RewardOptions, ClassListMixin):
    """보상 미세조정 설정"""
    base_checkpoint: str = Field("runs/pretrain/denoiser.ckpt", description="사전학습 denoiser")
    mode: FinetuneMode = FinetuneMode.DRAFT_K
    K: int = Field(1, ge=1, description="DRaFT-K 역전파 스텝 수")
    m: int = Field(20, ge=1, description="ReFL 최대 truncate 스텝")
    n: int = Field(2, ge=0, description="DRaFT-LV 내부 샘플 수")
    lr: float = Field(4e-4, gt=0)
    batch: int = Field(4, ge=1)
    steps: int = Field(2000, ge=0)
    weight_decay: float = Field(0.1, ge=0)
    clip_norm: float = Field(1.0, gt=0, description="전역 기울기 클리핑 노름 c")
    beta_kl: float = Field(0.0, ge=0, description="KL 정규화 계수")
    lora_rank: int = Field(8, ge=1)
    lr_decay: bool = False
    normalize_lv: bool = Field(False, description="LV 합을 n+1로 나눔")
    lv_guidance: bool = Field(True, description="LV 한 스텝 예측에 guidance 적용")
    log_every: int = Field(10, ge=1)
    save_every: int = Field(0, ge=0, description="어댑터 스냅샷 주기 (0: 마지막만)")

    @field_validator("mode", mode="before")
    @classmethod
    def _normalize_mode(cls, v: Any) -> Any:
        if isinstance(v, str):
            return v.strip().lower().replace("-", "_")
        return v

    @model_validator(mode="after")
    def _check_truncation(self) -> "FinetuneConfig":
        if self.K > self.sampler_steps:
            raise ValueError(f"K는 1..S 범위여야 합니다: K={self.K}, S={self.sampler_steps}")
        if self.m > self.sampler_steps:
            raise ValueError(f"m은 1..S 범위여야 합니다: m={self.m}, S={self.sampler_steps}")
        return self


class SampleConfig(SamplingOptions, ClassListMixin):
    """sample 설정"""
    checkpoint: str = "runs/pretrain/denoiser.ckpt"
    adapters: Optional[str] = Field(None, description="LoRA 어댑터 체크포인트")
    lora_scale: float = 1.0
    n_per_class: int = Field(4, ge=1)
    sampler: Literal["ddim", "ancestral"] = "ddim"
    png: bool = False


class EvalConfig(SamplingOptions, RewardOptions, ClassListMixin):
    """eval / lora-scale / lora-mix 공통 설정"""
    checkpoint: str = "runs/pretrain/denoiser.ckpt"
    adapters: Optional[str] = None
    adapters_b: Optional[str] = Field(None, description="lora-mix 두 번째 어댑터")
    lora_scale: float = 1.0
    n_samples: int = Field(16, description="클래스별 샘플 수")
    alphas: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    mix_pairs: List[Tuple[float, float]] = Field(
        default_factory=lambda: [(1.0, 0.0), (0.0, 1.0), (0.5, 0.5)],
        description="lora-mix (α, β) 쌍",
    )

    @field_validator("alphas", mode="before")
    @classmethod
    def _parse_alphas(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("mix_pairs", mode="before")
    @classmethod
    def _parse_pairs(cls, v: Any) -> Any:
        if isinstance(v, str):
            return [tuple(float(x) for x in item.split(":")) for item in _split_list(v)]
        return v


class WindowConfig(SamplingOptions, RewardOptions, ClassListMixin):
    """lora-window 설정"""
    checkpoint: str = "runs/pretrain/denoiser.ckpt"
    adapters: str = "runs/finetune/adapters.ckpt"
    window: Literal["start", "end"] = "start"
    windows: List[int] = Field(default_factory=lambda: [0, 2, 5, 10, 20, 30, 40, 50])
    n_per_class: int = Field(1, ge=1)

    @field_validator("windows", mode="before")
    @classmethod
    def _parse_windows(cls, v: Any) -> Any:
        return _split_list(v)


class DoodlConfig(SamplingOptions, RewardOptions):
    """doodl (초기 latent 최적화) 설정"""
    checkpoint: str = "runs/pretrain/denoiser.ckpt"
    adapters: Optional[str] = None
    class_id: int = Field(0, ge=0, lt=N_CLASSES)
    steps: int = Field(20, ge=0)
    lr: float = Field(0.05, gt=0)
    n_seeds: int = Field(1, ge=1)


class DiagConfig(SamplingOptions, RewardOptions, ClassListMixin):
    """diag-k / clip-ablation 설정"""
    base_checkpoint: str = "runs/pretrain/denoiser.ckpt"
    adapters: Optional[str] = None
    lora_rank: int = Field(8, ge=1)
    k_list: List[int] = Field(default_factory=lambda: [1, 5, 10, 30, 50])
    n_batches: int = Field(20, ge=1)
    batch: int = Field(4, ge=1)
    plot: bool = False
    clip_list: List[float] = Field(default_factory=lambda: [0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0])
    ablation_steps: int = Field(200, ge=1)
    lr: float = Field(4e-4, gt=0)
    weight_decay: float = Field(0.1, ge=0)
    n: int = Field(2, ge=0, description="분산 비교용 DRaFT-LV 내부 샘플 수")
    variance_resamples: int = Field(0, ge=0, description="LV vs DRaFT-1 분산 비교 재추출 수 (0: 생략)")

    @field_validator("k_list", "clip_list", mode="before")
    @classmethod
    def _parse_lists(cls, v: Any) -> Any:
        return _split_list(v)

    @model_validator(mode="after")
    def _check_k(self) -> "DiagConfig":
        for k in self.k_list:
            if not 1 <= k <= self.sampler_steps:
                raise ValueError(f"K는 1..S 범위여야 합니다: K={k}, S={self.sampler_steps}")
        return self


class GradCheckConfig(RunConfig):
    """grad-check 설정 (64비트 마이크로 모델)"""
    modes: List[FinetuneMode] = Field(default_factory=lambda: [FinetuneMode.DRAFT, FinetuneMode.DRAFT_K])
    k_list: List[int] = Field(default_factory=lambda: [1, 2, 5])
    sampler_steps: int = Field(5, ge=1)
    guidance_w: float = Field(2.0, ge=0)
    eps: float = Field(1e-5, gt=0)
    tolerance: float = Field(1e-3, gt=0)
    coords_per_leaf: int = Field(6, ge=1, description="leaf별 검사할 좌표 수")

    @field_validator("modes", "k_list", mode="before")
    @classmethod
    def _parse_lists(cls, v: Any) -> Any:
        v = _split_list(v)
        if isinstance(v, list):
            return [x.strip().lower().replace("-", "_") if isinstance(x, str) and not x.isdigit() else x for x in v]
        return v
