"""초기 latent 최적화"""

import math

import numpy as np
import pytest

from app.core.errors import NumericalError
from app.core.tensor import Tensor, square, sum_
from app.services.denoiser import Context
from app.services.latent_opt import doodl_optimize, final_sample, renormalize
from app.services.rewards import RewardFn
from app.utils.checkpoint_io import tensors_digest
from app.utils.rng import KeyedRng


@pytest.fixture
def x_init(f64):
    return renormalize(KeyedRng(8).normal("x_T", (3, 8, 8)))


def test_renormalize_sets_norm():
    x = renormalize(np.full((3, 8, 8), 0.1))
    assert np.linalg.norm(x) == pytest.approx(math.sqrt(192), rel=1e-6)


def test_renormalize_rejects_zero():
    with pytest.raises(NumericalError):
        renormalize(np.zeros(4))


def test_zero_steps_returns_initial_latent(active_params, schedule5, rotation_rewards, x_init):
    best, trace, curve = doodl_optimize(active_params, Context(2), x_init, schedule5, rotation_rewards,
                                        steps=0, guidance_w=2.0)
    np.testing.assert_array_equal(best, x_init)
    assert len(curve) == 1
    _, reward = final_sample(active_params, Context(2), x_init, schedule5, rotation_rewards, 2.0)
    assert curve[0] == pytest.approx(reward)


def test_optimization_keeps_model_and_norm(active_params, schedule5, rotation_rewards, x_init):
    digest = tensors_digest({**active_params.base, **active_params.trainable()})
    best, trace, curve = doodl_optimize(active_params, Context(2), x_init, schedule5, rotation_rewards,
                                        steps=3, lr=0.05, guidance_w=2.0)
    assert len(curve) == 4
    assert tensors_digest({**active_params.base, **active_params.trainable()}) == digest
    assert np.linalg.norm(best) == pytest.approx(math.sqrt(best.size), abs=1e-5)
    _, best_reward = final_sample(active_params, Context(2), best, schedule5, rotation_rewards, 2.0)
    assert best_reward == pytest.approx(max(curve))
    assert trace.x0.shape == (3, 8, 8)


def test_self_target_stays_at_initial_latent(active_params, schedule5, x_init):
    reference, _ = final_sample(active_params, Context(1), x_init, schedule5,
                                [(RewardFn("zero", lambda x, c: sum_(x) * 0.0), 1.0)], 2.0)
    target = Tensor((reference.x0.data + 1.0) * 0.5)
    rewards = [(RewardFn("self", lambda x, c: -sum_(square(x - target))), 1.0)]
    best, _, curve = doodl_optimize(active_params, Context(1), x_init, schedule5, rewards, steps=2, guidance_w=2.0)
    assert curve[0] == pytest.approx(0.0, abs=1e-12)
    assert all(v <= 1e-12 for v in curve)
    np.testing.assert_array_equal(best, x_init)
