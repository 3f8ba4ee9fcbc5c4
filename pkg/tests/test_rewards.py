"""보상 함수와 보상 결합"""

import numpy as np
import pytest
from pydantic import ValidationError as PydanticValidationError

from app.core.errors import MissingArtifactError, ShapeError, ValidationError
from app.core.gradcheck import finite_diff_check
from app.core.tensor import Tensor, log_softmax, no_grad
from app.schemas.config import RewardOptions
from app.services.denoiser import Context
from app.services.rewards import (
    build_reward,
    build_rewards,
    classifier_reward,
    combine_rewards,
    evaluate_rewards,
    rotate90,
    rotation_anticorr_reward,
    scorer_reward,
    to_unit_range,
)
from app.services.toy_models import classifier_logits, init_toy, save_toy


@pytest.fixture
def image():
    return np.random.default_rng(3).uniform(0.0, 1.0, size=(3, 8, 8))


def test_rotate90_matches_numpy(image):
    x = Tensor(image)
    for times in range(4):
        np.testing.assert_array_equal(rotate90(x, times).data, np.rot90(x.data, times, axes=(1, 2)))


def test_rotation_reward_zero_for_symmetric_image():
    symmetric = np.zeros((3, 8, 8))
    symmetric[:, 2:6, 2:6] = 1.0
    with no_grad():
        assert rotation_anticorr_reward(Tensor(symmetric)).item() == 0.0


def test_rotation_reward_positive_for_asymmetric_image(image):
    with no_grad():
        assert rotation_anticorr_reward(Tensor(image)).item() > 0.0


@pytest.mark.parametrize("row, col", [(0, 0), (1, 5), (7, 2)])
def test_single_off_centre_pixel_scores_two(row, col):
    # 회전마다 ‖x − Rot(x)‖² = 2
    hot = np.zeros((3, 8, 8))
    hot[1, row, col] = 1.0
    with no_grad():
        assert rotation_anticorr_reward(Tensor(hot)).item() == pytest.approx(2.0)


def test_incompressibility_is_negated_jpeg(image):
    c = Context(0)
    with no_grad():
        jpeg = build_reward("jpeg")(Tensor(image), c).item()
        incompressible = build_reward("incompressibility")(Tensor(image), c).item()
    assert incompressible == pytest.approx(-jpeg)


def test_combination_is_weighted_sum(image):
    rewards = [(build_reward("rotation"), 2.0), (build_reward("jpeg"), 0.5)]
    with no_grad():
        total, parts = combine_rewards(rewards, Tensor(image), Context(1))
    assert set(parts) == {"rotation", "jpeg"}
    assert total.item() == pytest.approx(2.0 * parts["rotation"] + 0.5 * parts["jpeg"], rel=1e-5)


def test_evaluate_adds_combined(image):
    values = evaluate_rewards([(build_reward("rotation"), 3.0)], image, Context(1))
    assert values["combined"] == pytest.approx(3.0 * values["rotation"], rel=1e-5)


def test_empty_reward_list():
    with pytest.raises(ValidationError):
        combine_rewards([], Tensor(np.zeros((3, 8, 8))), Context(0))


def test_non_square_image_rejected():
    with pytest.raises(ShapeError):
        build_reward("rotation")(Tensor(np.zeros((3, 8, 16))), Context(0))


def test_registry_errors():
    with pytest.raises(ValidationError):
        build_reward("aesthetic")
    with pytest.raises(MissingArtifactError):
        build_reward("classifier")
    with pytest.raises(MissingArtifactError):
        build_reward("scorer")


def test_classifier_reward_is_target_log_probability(image):
    net = init_toy("classifier", channels=4, image_size=8, seed=0)
    reward = build_reward("classifier", classifier=net, target_class=5)
    with no_grad():
        value = reward(Tensor(image), Context(0)).item()
        expected = log_softmax(classifier_logits(net, Tensor(image))).data[0, 5]
    assert value == pytest.approx(float(expected))
    assert value < 0.0


def test_classifier_target_out_of_range(image):
    net = init_toy("classifier", channels=4, image_size=8, seed=0)
    with pytest.raises(ValidationError):
        build_reward("classifier", classifier=net, target_class=9)(Tensor(image), Context(0))


def test_build_rewards_loads_toy_checkpoint(tmp_path, image):
    path = tmp_path / "scorer.ckpt"
    save_toy(str(path), init_toy("scorer", channels=4, image_size=8, seed=1))
    options = RewardOptions(rewards="scorer:2,rotation", scorer_checkpoint=str(path))
    built = build_rewards(options)
    assert [(fn.name, w) for fn, w in built] == [("scorer", 2.0), ("rotation", 1.0)]
    values = evaluate_rewards(built, image, Context(0))
    assert np.isfinite(values["scorer"])


def test_options_require_artifacts():
    with pytest.raises(PydanticValidationError):
        RewardOptions(rewards="classifier")
    with pytest.raises(PydanticValidationError):
        RewardOptions(rewards="scorer")


def test_unit_range_mapping():
    np.testing.assert_allclose(to_unit_range(Tensor(np.array([-1.0, 0.0, 1.0]))).data, [0.0, 0.5, 1.0])


class TestInputGradients:
    """보상의 이미지 기울기와 중앙 차분 비교 (64비트)"""

    def _image(self):
        return Tensor(np.random.default_rng(8).uniform(0.1, 0.9, size=(3, 8, 8)))

    def test_rotation(self, f64):
        assert finite_diff_check(rotation_anticorr_reward, self._image(), eps=1e-5, floor=1e-6) < 1e-4

    def test_classifier(self, f64):
        net = init_toy("classifier", channels=4, image_size=8, seed=2)
        err = finite_diff_check(lambda t: classifier_reward(t, net, 3), self._image(), eps=1e-6, floor=1e-6)
        assert err < 1e-4

    def test_scorer(self, f64):
        net = init_toy("scorer", channels=4, image_size=8, seed=2)
        err = finite_diff_check(lambda t: scorer_reward(t, net), self._image(), eps=1e-6, floor=1e-6)
        assert err < 1e-4
