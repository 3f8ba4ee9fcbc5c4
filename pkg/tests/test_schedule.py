"""노이즈 스케줄과 키 기반 난수"""

import numpy as np
import pytest

from app.core.errors import CheckpointFormatError, ShapeError, ValidationError
from app.core.tensor import Tensor
from app.services.schedule import ALPHA_MIN, forward_noise, make_schedule, schedule_from_meta
from app.utils.rng import KeyedRng


class TestCosineSchedule:
    def test_endpoints_and_monotonicity(self):
        s = make_schedule(1000, 50)
        assert s.alpha(0) == 1.0
        assert s.sigma(0) == 0.0
        assert s.alpha(1000) == pytest.approx(ALPHA_MIN)
        assert np.all(np.diff(s.alphas) < 0)

    def test_variance_preserving(self):
        s = make_schedule(1000, 10)
        np.testing.assert_allclose(s.alphas ** 2 + s.sigmas ** 2, 1.0, atol=1e-12)

    def test_sampler_grid(self):
        s = make_schedule(1000, 50)
        assert s.sampler_steps == 50
        assert s.sampler_grid[0] == 0 and s.sampler_grid[-1] == 1000
        assert np.all(np.diff(s.sampler_grid) > 0)
        assert s.step_indices(50) == (1000, int(s.sampler_grid[49]))
        assert s.step_indices(1) == (int(s.sampler_grid[1]), 0)

    def test_full_grid_when_s_equals_n(self):
        s = make_schedule(8, 8)
        np.testing.assert_array_equal(s.sampler_grid, np.arange(9))

    @pytest.mark.parametrize("n_train,steps", [(0, 1), (10, 0), (10, 11)])
    def test_invalid_sizes(self, n_train, steps):
        with pytest.raises(ValidationError):
            make_schedule(n_train, steps)

    def test_step_out_of_range(self):
        with pytest.raises(ValidationError):
            make_schedule(100, 5).step_indices(6)

    def test_rebuild_from_meta(self):
        s = make_schedule(200, 7)
        again = schedule_from_meta(s.to_meta())
        np.testing.assert_array_equal(again.alphas, s.alphas)
        np.testing.assert_array_equal(again.sampler_grid, s.sampler_grid)

    def test_rebuild_with_other_grid(self):
        again = schedule_from_meta(make_schedule(200, 7).to_meta(), sampler_steps=4)
        assert again.n_train == 200 and again.sampler_steps == 4

    @pytest.mark.parametrize("meta", [
        {"sampler_steps": 5},
        {"n_train": "many", "sampler_steps": 5},
        {"n_train": 200, "sampler_steps": 5, "cosine_offset": 0.1},
    ])
    def test_bad_meta_rejected(self, meta):
        with pytest.raises(CheckpointFormatError):
            schedule_from_meta(meta)

    def test_forward_noise(self):
        s = make_schedule(100, 5)
        x0, eps = Tensor(np.ones((3, 2, 2))), Tensor(np.zeros((3, 2, 2)))
        np.testing.assert_allclose(forward_noise(s, x0, 0, eps).data, 1.0)
        with pytest.raises(ShapeError):
            forward_noise(s, x0, 3, Tensor(np.zeros(3)))


class TestKeyedRng:
    def test_same_key_same_values(self):
        a = KeyedRng(5).normal("x_T", (4,), step=2, index=1)
        b = KeyedRng(5).normal("x_T", (4,), step=2, index=1)
        np.testing.assert_array_equal(a, b)

    def test_keys_are_independent(self):
        rng = KeyedRng(5)
        base = rng.normal("x_T", (4,))
        assert not np.array_equal(base, rng.normal("x_T", (4,), step=1))
        assert not np.array_equal(base, rng.normal("x_T", (4,), index=1))
        assert not np.array_equal(base, rng.normal("eps", (4,)))
        assert not np.array_equal(base, KeyedRng(6).normal("x_T", (4,)))

    def test_randint_is_inclusive(self):
        rng = KeyedRng(0)
        draws = {rng.randint("t", 1, 3, step=i) for i in range(200)}
        assert draws == {1, 2, 3}

    def test_child_is_deterministic(self):
        assert KeyedRng(9).child("pool").seed == KeyedRng(9).child("pool").seed
        assert KeyedRng(9).child("pool").seed != KeyedRng(9).child("other").seed
