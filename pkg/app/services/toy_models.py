"""보상용 toy 모델: 분류기(8클래스 logit)와 점수 모델(전경 면적 → [1, 10])

denoiser와 같은 conv 계열 backbone: conv → silu → conv → silu → 전역 평균 → linear.
보상으로 쓸 때는 파라미터가 고정되고 기울기는 입력 이미지로만 흐른다.
"""

import time
from dataclasses import dataclass
from typing import Dict, Literal, Optional, Tuple

import numpy as np

from app.core.errors import CheckpointFormatError, ValidationError
from app.core.tensor import Tape, Tensor, backward, log_softmax, mean, no_grad, reshape, silu, softmax, square
from app.schemas.config import N_CLASSES, ToyTrainConfig
from app.schemas.records import MetricsRecord
from app.services.dataset import SyntheticDataset, scorer_target
from app.services.layers import conv3x3, dense
from app.services.optimizer import AdamW
from app.utils.checkpoint_io import load_checkpoint, save_checkpoint
from app.utils.logger import get_logger
from app.utils.metrics import MetricsWriter
from app.utils.rng import KeyedRng

logger = get_logger(__name__)

ToyKind = Literal["classifier", "scorer"]


@dataclass
class ToyNet:
    """고정 backbone 파라미터 묶음 (LayerStore)"""
    kind: ToyKind
    channels: int
    image_size: int
    base: Dict[str, Tensor]

    @property
    def n_out(self) -> int:
        return N_CLASSES if self.kind == "classifier" else 1

    def weight(self, name: str) -> Tensor:
        return self.base[f"{name}.weight"]

    def bias(self, name: str) -> Tensor:
        return self.base[f"{name}.bias"]

    def adapter_out(self, name: str, x2d: Tensor) -> Optional[Tensor]:
        return None

    def set_trainable(self, enabled: bool) -> None:
        for t in self.base.values():
            t.requires_grad = enabled


def init_toy(kind: ToyKind, channels: int, image_size: int, seed: int) -> ToyNet:
    rng = KeyedRng(seed).child(f"{kind}-init")
    n_out = N_CLASSES if kind == "classifier" else 1
    base = {
        "conv1.weight": Tensor(rng.normal("conv1", (channels, 3, 3, 3)) * np.sqrt(2.0 / 27)),
        "conv1.bias": Tensor(np.zeros(channels)),
        "conv2.weight": Tensor(rng.normal("conv2", (channels, channels, 3, 3)) * np.sqrt(2.0 / (channels * 9))),
        "conv2.bias": Tensor(np.zeros(channels)),
        "head.weight": Tensor(rng.normal("head", (n_out, channels)) * np.sqrt(1.0 / channels)),
        "head.bias": Tensor(np.zeros(n_out)),
    }
    return ToyNet(kind=kind, channels=channels, image_size=image_size, base=base)


def toy_forward(net: ToyNet, images: Tensor) -> Tensor:
    """(N,3,H,W) 또는 (3,H,W) → (N, n_out)"""
    x = reshape(images, (1,) + images.shape) if images.ndim == 3 else images
    h = silu(conv3x3(net, "conv1", x))
    h = silu(conv3x3(net, "conv2", h))
    pooled = mean(h, axis=(2, 3))
    return dense(net, "head", pooled)


def classifier_logits(net: ToyNet, images: Tensor) -> Tensor:
    return toy_forward(net, images)


def scorer_output(net: ToyNet, images: Tensor) -> Tensor:
    return reshape(toy_forward(net, images), (-1,))


def _loss(net: ToyNet, images: Tensor, labels: np.ndarray, targets: np.ndarray) -> Tensor:
    out = toy_forward(net, images)
    if net.kind == "classifier":
        logp = log_softmax(out, axis=-1)
        picked = logp * Tensor(np.eye(N_CLASSES)[labels])
        return -(picked.sum() * (1.0 / len(labels)))
    return mean(square(reshape(out, (-1,)) - Tensor(targets)))


def evaluate_toy(net: ToyNet, dataset: SyntheticDataset, batch: int = 256) -> float:
    """분류기: 정확도 (정답 클래스 평균 확률은 로그로), 점수 모델: MSE"""
    correct, confidence, sq_err = 0, 0.0, 0.0
    with no_grad():
        for start in range(0, len(dataset), batch):
            imgs = Tensor(dataset.images[start:start + batch])
            out = toy_forward(net, imgs)
            if net.kind == "classifier":
                labels = dataset.labels[start:start + batch]
                probs = softmax(out, axis=-1).data
                correct += int((probs.argmax(axis=1) == labels).sum())
                confidence += float(probs[np.arange(len(labels)), labels].sum())
            else:
                tgt = scorer_target(dataset.areas[start:start + batch])
                sq_err += float(((out.data[:, 0] - tgt) ** 2).sum())
    if net.kind == "classifier":
        logger.info(f"📊 [TOY_EVAL] 정답 클래스 평균 확률 {confidence / len(dataset):.3f}")
        return correct / len(dataset)
    return sq_err / len(dataset)


def train_toy(
    kind: ToyKind,
    config: ToyTrainConfig,
    dataset: SyntheticDataset,
    writer: Optional[MetricsWriter] = None,
) -> Tuple[ToyNet, float]:
    """AdamW로 toy 모델을 학습하고 (모델, 학습셋 정확도/MSE)를 반환"""
    if dataset.images.shape[-1] != config.image_size:
        raise ValidationError(f"데이터셋 이미지 크기({dataset.images.shape[-1]})와 설정({config.image_size})이 다릅니다")
    net = init_toy(kind, config.channels, config.image_size, config.seed)
    net.set_trainable(True)
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay, clip_norm=10.0)
    rng = KeyedRng(config.seed)
    logger.info(f"🚀 [TOY_TRAIN] {kind} 학습 시작: steps={config.steps}, batch={config.batch}")

    for step in range(1, config.steps + 1):
        started = time.perf_counter()
        idx = rng.generator("toy-batch", step).integers(0, len(dataset), size=config.batch)
        images = dataset.images[idx]
        labels = dataset.labels[idx]
        targets = scorer_target(dataset.areas[idx])
        if kind == "scorer" and config.blank_fraction > 0:
            blank = rng.uniform("toy-blank", (config.batch,), step) < config.blank_fraction
            if blank.any():
                images = images.copy()
                images[blank] = dataset.backgrounds_for(idx[blank])
                targets = np.where(blank, scorer_target(np.zeros(config.batch)), targets)
        with Tape() as tape:
            loss = _loss(net, Tensor(images), labels, targets)
        loss_value = loss.item()
        grads = backward(tape, loss, net.base)
        norm, lr = opt.step(net.base, grads)
        record = MetricsRecord(step=step, grad_norm=norm, loss=loss_value, lr=lr,
                               wall_ms=(time.perf_counter() - started) * 1000.0)
        if writer is not None:
            writer.write(record)
        if step % config.log_every == 0 or step == config.steps:
            logger.info(f"📈 [TOY_TRAIN] {kind} step {step}/{config.steps} loss={loss_value:.4f}")

    net.set_trainable(False)
    score = evaluate_toy(net, dataset)
    label = "정확도" if kind == "classifier" else "MSE"
    logger.info(f"✅ [TOY_TRAIN] {kind} 학습 완료: 학습셋 {label} {score:.4f}")
    return net, score


def save_toy(path: str, net: ToyNet) -> str:
    meta = {"kind": net.kind, "channels": net.channels, "image_size": net.image_size}
    save_checkpoint(path, net.base, meta)
    return path


def load_toy(path: str, kind: ToyKind) -> ToyNet:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != kind:
        raise CheckpointFormatError(f"{kind} 체크포인트가 아닙니다: {path} (kind={meta.get('kind')})")
    return ToyNet(kind=kind, channels=int(meta["channels"]), image_size=int(meta["image_size"]),
                  base={k: Tensor(v) for k, v in tensors.items()})
