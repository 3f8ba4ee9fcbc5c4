"""미분 가능한 보상 함수: reward(x0 ∈ [0,1]^(3×H×W), c) → 스칼라 Tensor (최대화 방향)"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import MissingArtifactError, ShapeError, ValidationError
from app.core.tensor import Tensor, flip, log_softmax, no_grad, reshape, square, sum_, transpose
from app.schemas.config import N_CLASSES, RewardOptions
from app.services.denoiser import Context
from app.services.jpeg import jpeg_roundtrip
from app.services.toy_models import ToyNet, classifier_logits, load_toy, scorer_output
from app.utils.logger import get_logger

logger = get_logger(__name__)

RewardCallable = Callable[[Tensor, Context], Tensor]


@dataclass(frozen=True)
class RewardFn:
    """이름 붙은 보상 함수 (가중치는 combine_rewards에서 곱한다)"""
    name: str
    fn: RewardCallable

    def __call__(self, x0: Tensor, c: Context) -> Tensor:
        return self.fn(x0, c)


def _check_image(x0: Tensor) -> None:
    if x0.ndim != 3 or x0.shape[0] != 3 or x0.shape[1] != x0.shape[2]:
        raise ShapeError(f"보상 입력은 정사각형 (3,H,W) 이미지여야 합니다: {x0.shape}")


def jpeg_reward(x0: Tensor, quality: int = 50, rounding: str = "exact") -> Tensor:
    """−‖x0 − d(c(x0))‖² (입력은 [0,1]로 클램프 후 인코딩)"""
    _check_image(x0)
    clamped, recon = jpeg_roundtrip(x0, quality, rounding)
    return -sum_(square(clamped - recon))


def incompressibility_reward(x0: Tensor, quality: int = 50, rounding: str = "exact") -> Tensor:
    return -jpeg_reward(x0, quality, rounding)


def classifier_reward(x0: Tensor, classifier: ToyNet, target_class: int) -> Tensor:
    """목표 클래스에 대한 −cross-entropy (분류기 파라미터는 고정)"""
    _check_image(x0)
    if not 0 <= target_class < N_CLASSES:
        raise ValidationError(f"target_class 범위 초과: {target_class}")
    logp = log_softmax(classifier_logits(classifier, x0), axis=-1)
    return reshape(logp[:, target_class], ())


def rotate90(x: Tensor, times: int) -> Tensor:
    """(C,H,W)를 90°·times 반시계 회전 (정확한 인덱스 순열)"""
    times %= 4
    if times == 0:
        return x
    if times == 1:
        return flip(transpose(x, (0, 2, 1)), axis=1)
    if times == 2:
        return flip(flip(x, axis=1), axis=2)
    return flip(transpose(x, (0, 2, 1)), axis=2)


def rotation_anticorr_reward(x0: Tensor) -> Tensor:
    """(1/3)·Σ_{90°,180°,270°} ‖x − Rot(x)‖²"""
    _check_image(x0)
    total = sum_(square(x0 - rotate90(x0, 1)))
    for times in (2, 3):
        total = total + sum_(square(x0 - rotate90(x0, times)))
    return total * (1.0 / 3.0)


def scorer_reward(x0: Tensor, scorer: ToyNet) -> Tensor:
    _check_image(x0)
    return reshape(scorer_output(scorer, x0), ())


def combine_rewards(
    rewards: Sequence[Tuple[RewardFn, float]],
    x0: Tensor,
    c: Context,
) -> Tuple[Tensor, Dict[str, float]]:
    """Σ weight_i·r_i(x0, c)와 보상별 (가중 전) 값"""
    if not rewards:
        raise ValidationError("보상이 하나 이상 필요합니다")
    total: Optional[Tensor] = None
    parts: Dict[str, float] = {}
    for fn, weight in rewards:
        value = fn(x0, c)
        parts[fn.name] = parts.get(fn.name, 0.0) + value.item()
        term = value * weight
        total = term if total is None else total + term
    assert total is not None
    return total, parts


def build_reward(
    name: str,
    quality: int = 50,
    rounding: str = "exact",
    classifier: Optional[ToyNet] = None,
    scorer: Optional[ToyNet] = None,
    target_class: Optional[int] = None,
) -> RewardFn:
    """보상 레지스트리"""
    if name == "jpeg":
        return RewardFn("jpeg", lambda x, c: jpeg_reward(x, quality, rounding))
    if name == "incompressibility":
        return RewardFn("incompressibility", lambda x, c: incompressibility_reward(x, quality, rounding))
    if name == "rotation":
        return RewardFn("rotation", lambda x, c: rotation_anticorr_reward(x))
    if name == "classifier":
        if classifier is None or target_class is None:
            raise MissingArtifactError("classifier 보상에는 분류기와 target_class가 필요합니다")
        target = int(target_class)
        net = classifier
        return RewardFn("classifier", lambda x, c: classifier_reward(x, net, target))
    if name == "scorer":
        if scorer is None:
            raise MissingArtifactError("scorer 보상에는 점수 모델 체크포인트가 필요합니다")
        sc = scorer
        return RewardFn("scorer", lambda x, c: scorer_reward(x, sc))
    raise ValidationError(f"알 수 없는 보상: {name}")


def build_rewards(options: RewardOptions) -> List[Tuple[RewardFn, float]]:
    """설정의 'name:weight' 목록 → (RewardFn, weight) 목록 (필요한 toy 모델은 여기서 로드)"""
    names = {r.name for r in options.rewards}
    classifier: Optional[ToyNet] = None
    scorer: Optional[ToyNet] = None
    if "classifier" in names and options.classifier_checkpoint:
        classifier = load_toy(options.classifier_checkpoint, "classifier")
    if "scorer" in names and options.scorer_checkpoint:
        scorer = load_toy(options.scorer_checkpoint, "scorer")
    built = [
        (build_reward(r.name, options.jpeg_quality, options.jpeg_rounding, classifier, scorer, options.target_class),
         r.weight)
        for r in options.rewards
    ]
    logger.info(f"🎯 [REWARDS] {', '.join(f'{fn.name}×{w:g}' for fn, w in built)}")
    return built


def to_unit_range(x: Tensor) -> Tensor:
    """모델 공간 [-1,1] → 보상 공간 [0,1]"""
    return (x + 1.0) * 0.5


def evaluate_rewards(rewards: Sequence[Tuple[RewardFn, float]], image01: np.ndarray, c: Context) -> Dict[str, float]:
    """기록 없이 보상별 값만 계산 (평가/HTTP용)"""
    with no_grad():
        total, parts = combine_rewards(rewards, Tensor(image01), c)
    parts["combined"] = total.item()
    return parts
