"""AdamW, 전역 노름 클리핑, 학습률 감쇠"""

import math

import numpy as np
import pytest

from app.core.errors import NumericalError, ValidationError
from app.core.tensor import Tensor
from app.services.optimizer import AdamW, clip_by_global_norm, global_norm, lr_multiplier


@pytest.mark.parametrize("step,expected", [(1, 1.0), (100, 1.0), (400, 0.5), (10000, 0.1)])
def test_lr_multiplier(step, expected):
    assert lr_multiplier(step, True) == pytest.approx(expected)


def test_lr_multiplier_disabled():
    assert lr_multiplier(400, False) == 1.0


def test_clipping_rescales_to_max_norm():
    grads = {"a": Tensor(np.array([6.0, 0.0])), "b": Tensor(np.array([8.0]))}
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == pytest.approx(10.0)
    assert global_norm(clipped) == pytest.approx(1.0, rel=1e-6)


def test_small_gradients_untouched():
    grads = {"a": Tensor(np.array([0.3, 0.4]))}
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == pytest.approx(0.5)
    assert clipped["a"] is grads["a"]


def test_infinite_clip_never_clips():
    grads = {"a": Tensor(np.array([1e6]))}
    clipped, _ = clip_by_global_norm(grads, math.inf)
    assert clipped["a"].data[0] == pytest.approx(1e6)


def test_invalid_clip_norm():
    with pytest.raises(ValidationError):
        clip_by_global_norm({"a": Tensor(np.ones(1))}, 0.0)


def test_zero_gradient_without_decay_keeps_params():
    p = Tensor(np.array([1.0, -2.0]))
    opt = AdamW(lr=0.1, weight_decay=0.0)
    for _ in range(3):
        opt.step({"p": p}, {"p": Tensor(np.zeros(2))})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_first_step_moves_by_learning_rate():
    p = Tensor(np.array([0.0, 0.0]))
    opt = AdamW(lr=0.01, weight_decay=0.0, clip_norm=math.inf)
    norm, lr = opt.step({"p": p}, {"p": Tensor(np.array([3.0, -0.5]))})
    assert lr == 0.01
    assert norm == pytest.approx(math.sqrt(9.25))
    np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-5)


def test_decoupled_weight_decay():
    p = Tensor(np.array([2.0]))
    AdamW(lr=0.5, weight_decay=0.1).step({"p": p}, {"p": Tensor(np.zeros(1))})
    np.testing.assert_allclose(p.data, [2.0 * (1 - 0.05)], rtol=1e-6)


def test_decay_schedule_is_applied():
    p = Tensor(np.zeros(1))
    opt = AdamW(lr=1.0, weight_decay=0.0, lr_decay=True)
    opt.step_count = 399
    _, lr = opt.step({"p": p}, {"p": Tensor(np.ones(1))})
    assert lr == pytest.approx(0.5)


def test_non_finite_gradient():
    p = Tensor(np.zeros(1))
    with pytest.raises(NumericalError):
        AdamW().step({"p": p}, {"p": Tensor(np.array([np.inf]))})


def test_negative_learning_rate():
    with pytest.raises(ValidationError):
        AdamW(lr=-1.0)
