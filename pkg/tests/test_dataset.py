"""합성 데이터셋"""

import numpy as np
import pytest

from app.core.errors import CheckpointFormatError, ValidationError
from app.services.dataset import (
    class_name,
    gen_dataset,
    load_dataset,
    obtain_dataset,
    preview_items,
    render_item,
    save_dataset,
    scorer_target,
)
from app.utils.checkpoint_io import save_checkpoint


@pytest.fixture(scope="module")
def dataset():
    return gen_dataset(seed=1, n=32, image_size=8)


def test_shapes_and_range(dataset):
    assert dataset.images.shape == (32, 3, 8, 8)
    assert dataset.images.min() >= 0.0 and dataset.images.max() <= 1.0
    assert np.all((dataset.areas > 0.0) & (dataset.areas < 1.0))


def test_labels_are_balanced(dataset):
    assert set(dataset.class_counts().values()) == {4}


def test_same_seed_same_pixels(dataset):
    again = gen_dataset(seed=1, n=32, image_size=8)
    np.testing.assert_array_equal(again.images, dataset.images)
    assert not np.array_equal(gen_dataset(seed=2, n=32, image_size=8).images, dataset.images)


def test_item_does_not_depend_on_dataset_size():
    image, _ = render_item(seed=1, index=5, label=5, size=8)
    np.testing.assert_array_equal(gen_dataset(seed=1, n=8, image_size=8).images[5], image.astype(np.float32))


def test_class_names():
    assert class_name(0) == "red circle"
    assert class_name(7) == "yellow square"


def test_scorer_target_range():
    np.testing.assert_allclose(scorer_target(np.array([0.0, 0.5])), [1.0, 10.0])


def test_backgrounds_have_no_shape(dataset):
    backgrounds = dataset.backgrounds_for(np.array([0, 1]))
    assert backgrounds.shape == (2, 3, 8, 8)
    assert not np.allclose(backgrounds[0], dataset.images[0])


def test_invalid_sizes():
    with pytest.raises(ValidationError):
        gen_dataset(seed=0, n=0)
    with pytest.raises(ValidationError):
        gen_dataset(seed=0, n=8, image_size=12)


def test_round_trip(tmp_path, dataset):
    path = save_dataset(str(tmp_path / "dataset.bin"), dataset)
    assert path == str(tmp_path / "dataset.bin")
    loaded = load_dataset(path)
    np.testing.assert_array_equal(loaded.images, dataset.images)
    np.testing.assert_array_equal(loaded.labels, dataset.labels)
    assert loaded.seed == 1


def test_obtain_prefers_saved_file(tmp_path, dataset):
    path = save_dataset(str(tmp_path / "dataset.ckpt"), dataset)
    loaded = obtain_dataset(path, seed=99, n=8, image_size=dataset.image_size)
    assert loaded.seed == 1 and len(loaded) == len(dataset)
    fresh = obtain_dataset(None, seed=2, n=8, image_size=8)
    assert fresh.seed == 2 and len(fresh) == 8
    with pytest.raises(ValidationError):
        obtain_dataset(path, seed=1, n=8, image_size=dataset.image_size + 8)


def test_wrong_kind(tmp_path):
    path = tmp_path / "other.ckpt"
    save_checkpoint(path, {"x": np.zeros(2)}, {"kind": "denoiser"})
    with pytest.raises(CheckpointFormatError):
        load_dataset(str(path))


def test_preview(dataset):
    items = preview_items(dataset, 4)
    assert len(items) == 4 and items[0].dtype == np.float64
    assert len(preview_items(dataset, 100)) == 32
