"""합성 데이터셋: 부드러운 그라디언트 배경 위의 anti-aliased 도형

라벨 = shape·4 + color (shape ∈ {circle, square}, color ∈ {red, green, blue, yellow}).
라벨은 round-robin으로 배정하므로 N이 8의 배수면 클래스별 개수가 정확히 같다.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.core.errors import CheckpointFormatError, ValidationError
from app.schemas.config import N_CLASSES
from app.utils.checkpoint_io import load_checkpoint, save_checkpoint
from app.utils.logger import get_logger
from app.utils.rng import KeyedRng

logger = get_logger(__name__)

SHAPES = ("circle", "square")
COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.15, 0.30, 0.90),
    "yellow": (0.95, 0.85, 0.15),
}
COLOR_NAMES = tuple(COLORS)
SUPERSAMPLE = 4
AREA_RANGE = (0.08, 0.45)


def class_name(label: int) -> str:
    shape, color = divmod(label, len(COLOR_NAMES))
    return f"{COLOR_NAMES[color]} {SHAPES[shape]}"


def scorer_target(areas: np.ndarray) -> np.ndarray:
    """전경 면적 비율 → 점수 1 + 18·area (면적 0.5에서 10)"""
    return 1.0 + 18.0 * np.asarray(areas, dtype=np.float64)


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (N,3,S,S) [0,1]
    labels: np.ndarray  # (N,)
    areas: np.ndarray  # (N,) 전경 면적 비율
    seed: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    def backgrounds_for(self, indices: np.ndarray) -> np.ndarray:
        """해당 항목의 도형 없는 배경 (점수 모델의 전경 0 샘플)"""
        return np.stack([_background(KeyedRng(self.seed), int(i), self.image_size) for i in indices])

    def class_counts(self) -> Dict[int, int]:
        return {c: int((self.labels == c).sum()) for c in range(N_CLASSES)}


def _background(rng: KeyedRng, index: int, size: int) -> np.ndarray:
    gen = rng.generator("background", 0, index)
    c1 = gen.uniform(0.25, 0.75, size=3)
    c2 = gen.uniform(0.25, 0.75, size=3)
    theta = gen.uniform(0.0, 2.0 * np.pi)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    proj = (np.cos(theta) * xs + np.sin(theta) * ys) / size
    proj = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
    return c1[:, None, None] + (c2 - c1)[:, None, None] * proj[None]


def _coverage(shape: str, cx: float, cy: float, extent: float, size: int) -> np.ndarray:
    """픽셀별 도형 점유율 (SUPERSAMPLE² 서브픽셀 평균)"""
    fine = size * SUPERSAMPLE
    ys, xs = (np.mgrid[0:fine, 0:fine].astype(np.float64) + 0.5) / SUPERSAMPLE
    if shape == "circle":
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= extent ** 2
    else:
        half = extent / 2.0
        inside = (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    return inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def render_item(seed: int, index: int, label: int, size: int) -> Tuple[np.ndarray, float]:
    """항목 하나 렌더링 → (이미지, 면적 비율)"""
    rng = KeyedRng(seed)
    gen = rng.generator("shape", 0, index)
    shape_idx, color_idx = divmod(label, len(COLOR_NAMES))
    shape = SHAPES[shape_idx]
    target_area = gen.uniform(*AREA_RANGE)
    if shape == "circle":
        extent = float(np.sqrt(target_area * size * size / np.pi))
        margin = extent
    else:
        extent = float(np.sqrt(target_area) * size)
        margin = extent / 2.0
    cx = gen.uniform(margin, size - margin)
    cy = gen.uniform(margin, size - margin)
    cov = _coverage(shape, cx, cy, extent, size)
    color = np.asarray(COLORS[COLOR_NAMES[color_idx]])[:, None, None]
    image = _background(rng, index, size) * (1.0 - cov[None]) + color * cov[None]
    return np.clip(image, 0.0, 1.0), float(cov.mean())


def gen_dataset(seed: int, n: int, image_size: int = 24) -> SyntheticDataset:
    """seed에서 결정되는 라벨 균형 데이터셋"""
    if n < 1:
        raise ValidationError(f"데이터셋 크기는 1 이상이어야 합니다: {n}")
    if image_size % 8:
        raise ValidationError(f"이미지 크기는 8의 배수여야 합니다: {image_size}")
    images = np.zeros((n, 3, image_size, image_size), dtype=np.float32)
    labels = np.arange(n, dtype=np.int64) % N_CLASSES
    areas = np.zeros(n, dtype=np.float64)
    for i in range(n):
        img, area = render_item(seed, i, int(labels[i]), image_size)
        images[i] = img
        areas[i] = area
    logger.info(
        f"🎨 [DATASET] 생성 완료: N={n}, 크기={image_size}, 평균 픽셀={images.mean():.3f}, "
        f"면적 범위=[{areas.min():.3f}, {areas.max():.3f}]"
    )
    return SyntheticDataset(images=images, labels=labels, areas=areas, seed=seed)


def save_dataset(path: str, dataset: SyntheticDataset) -> str:
    meta: Dict[str, Any] = {"kind": "dataset", "seed": dataset.seed, "n": len(dataset),
                            "image_size": dataset.image_size}
    save_checkpoint(path, {"images": dataset.images, "labels": dataset.labels, "areas": dataset.areas}, meta)
    return path


def load_dataset(path: str) -> SyntheticDataset:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "dataset":
        raise CheckpointFormatError(f"데이터셋 파일이 아닙니다: {path}")
    return SyntheticDataset(images=tensors["images"], labels=tensors["labels"], areas=tensors["areas"],
                            seed=int(meta["seed"]))


def obtain_dataset(path: Optional[str], seed: int, n: int, image_size: int) -> SyntheticDataset:
    """저장된 데이터셋이 있으면 읽고, 없으면 seed로 생성"""
    if path is None:
        return gen_dataset(seed, n, image_size)
    dataset = load_dataset(path)
    if dataset.image_size != image_size:
        raise ValidationError(f"데이터셋 이미지 크기가 설정과 다릅니다: {dataset.image_size} vs {image_size}")
    logger.info(f"🎨 [DATASET] {path}에서 {len(dataset)}개 로드 (seed={dataset.seed})")
    return dataset


def preview_items(dataset: SyntheticDataset, count: int) -> List[np.ndarray]:
    """클래스 순서대로 미리보기 이미지를 고른다"""
    return [dataset.images[i].astype(np.float64) for i in range(min(count, len(dataset)))]
