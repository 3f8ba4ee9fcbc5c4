"""denoiser 순전파, LoRA 산술, 체크포인트"""

import numpy as np
import pytest

from app.core.errors import CheckpointFormatError, ShapeError, ValidationError
from app.core.tensor import Tensor
from app.services.denoiser import (
    Context,
    adapted_layer_names,
    attach_adapters,
    cfg_eps,
    eps_theta,
    load_adapters,
    load_denoiser,
    lora_mix,
    lora_scale_set,
    save_adapters,
    save_denoiser,
)
from app.services.schedule import make_schedule
from app.utils.rng import KeyedRng


@pytest.fixture
def x_t():
    return Tensor(KeyedRng(1).normal("x", (3, 8, 8)))


class TestForward:
    def test_output_shape_single_and_batch(self, base_params, x_t):
        assert eps_theta(base_params, x_t, Context(0), 10).shape == (3, 8, 8)
        batch = Tensor(np.stack([x_t.data, x_t.data]))
        out = eps_theta(base_params, batch, [Context(0), Context.null()], [10, 20])
        assert out.shape == (2, 3, 8, 8)

    def test_wrong_image_shape(self, base_params):
        with pytest.raises(ShapeError):
            eps_theta(base_params, Tensor(np.zeros((3, 16, 16))), Context(0), 1)

    def test_class_out_of_range(self, base_params, x_t):
        with pytest.raises(ValidationError):
            eps_theta(base_params, x_t, Context(8), 1)

    def test_off_grid_step_rejected(self, base_params, x_t, schedule5):
        with pytest.raises(ValidationError):
            eps_theta(base_params, x_t, Context(0), 7, schedule5)
        eps_theta(base_params, x_t, Context(0), 200, schedule5)

    def test_guidance_needs_real_condition(self, base_params, x_t):
        with pytest.raises(ValidationError):
            cfg_eps(base_params, x_t, Context.null(), 10, 2.0)

    def test_zero_guidance_is_conditional_eps(self, base_params, x_t):
        np.testing.assert_array_equal(
            cfg_eps(base_params, x_t, Context(2), 10, 0.0).data,
            eps_theta(base_params, x_t, Context(2), 10).data,
        )


class TestLora:
    def test_fresh_adapters_keep_base_output(self, base_params, lora_params, x_t):
        np.testing.assert_array_equal(
            eps_theta(lora_params, x_t, Context(3), 50).data,
            eps_theta(base_params, x_t, Context(3), 50).data,
        )

    def test_trainable_names_and_frozen_base(self, lora_params, micro_spec):
        names = list(lora_params.trainable())
        assert names == sorted(names)
        assert len(names) == 2 * len(adapted_layer_names(micro_spec))
        assert all(n.startswith("lora/") and n[-2:] in ("/A", "/B") for n in names)
        assert not any(t.requires_grad for t in lora_params.base.values())
        assert all(t.requires_grad for t in lora_params.trainable().values())

    def test_rank_is_capped_per_layer(self, base_params):
        wide = attach_adapters(base_params, rank=64, seed=0)
        conv_out = wide.adapters["conv_out"]
        assert conv_out.rank == 3
        assert conv_out.B.data.shape == (3, 3)

    def test_invalid_rank(self, base_params):
        with pytest.raises(ValidationError):
            attach_adapters(base_params, rank=0, seed=0)

    def test_scale_zero_equals_base(self, active_params, x_t):
        np.testing.assert_array_equal(
            eps_theta(lora_scale_set(active_params, 0.0), x_t, Context(1), 100).data,
            eps_theta(active_params.base_only(), x_t, Context(1), 100).data,
        )

    def test_scale_one_differs_from_base(self, active_params, x_t):
        adapted = eps_theta(active_params, x_t, Context(1), 100).data
        base = eps_theta(active_params.base_only(), x_t, Context(1), 100).data
        assert np.abs(adapted - base).max() > 1e-6

    def test_merged_form_matches_factored(self, active_params, x_t):
        np.testing.assert_allclose(
            eps_theta(active_params.merged_form(), x_t, Context(4), 300).data,
            eps_theta(active_params, x_t, Context(4), 300).data,
            rtol=1e-10, atol=1e-12,
        )

    def test_mix_endpoints(self, active_params, x_t):
        a = active_params.adapters
        b = {name: adapter for name, adapter in attach_adapters(active_params.base_only(), 2, seed=9).adapters.items()}
        only_a = lora_mix(a, b, 1.0, 0.0)
        for layer, adapter in a.items():
            np.testing.assert_allclose(only_a[layer].data, adapter.delta())
        mixed = active_params.with_merged(only_a)
        np.testing.assert_allclose(
            eps_theta(mixed, x_t, Context(0), 100).data,
            eps_theta(active_params, x_t, Context(0), 100).data,
            rtol=1e-10, atol=1e-12,
        )

    def test_mix_rejects_mismatched_layers(self, active_params):
        a = active_params.adapters
        partial = {k: v for k, v in a.items() if k != "conv_out"}
        with pytest.raises(ValidationError):
            lora_mix(a, partial, 0.5, 0.5)

    def test_mix_rejects_rank_mismatch(self, active_params):
        other = attach_adapters(active_params.base_only(), rank=1, seed=0).adapters
        with pytest.raises(ValidationError):
            lora_mix(active_params.adapters, other, 0.5, 0.5)


class TestCheckpoints:
    def test_denoiser_round_trip(self, tmp_path, base_params):
        path = save_denoiser(str(tmp_path / "d.ckpt"), base_params, make_schedule(1000, 3))
        assert path == str(tmp_path / "d.ckpt")
        loaded, meta = load_denoiser(path)
        assert meta["schedule"]["n_train"] == 1000
        assert loaded.spec == base_params.spec
        for name, tensor in base_params.base.items():
            np.testing.assert_array_equal(loaded.base[name].data, tensor.data)

    def test_adapter_file_is_not_a_denoiser(self, tmp_path, lora_params):
        path = save_adapters(str(tmp_path / "a.ckpt"), lora_params)
        with pytest.raises(CheckpointFormatError):
            load_denoiser(path)

    def test_adapters_round_trip(self, tmp_path, active_params, x_t):
        path = save_adapters(str(tmp_path / "a.ckpt"), active_params, {"step": 3})
        assert path == str(tmp_path / "a.ckpt")
        restored = load_adapters(path, active_params.base_only())
        assert set(restored.trainable()) == set(active_params.trainable())
        np.testing.assert_array_equal(
            eps_theta(restored, x_t, Context(5), 10).data,
            eps_theta(active_params, x_t, Context(5), 10).data,
        )

    def test_merged_adapters_round_trip(self, tmp_path, active_params, x_t):
        merged = active_params.merged_form()
        restored = load_adapters(save_adapters(str(tmp_path / "m.ckpt"), merged), active_params.base_only())
        assert not restored.adapters
        np.testing.assert_allclose(
            eps_theta(restored, x_t, Context(5), 10).data,
            eps_theta(merged, x_t, Context(5), 10).data,
        )
