"""DDIM 샘플러 절단 위치, ancestral 샘플러, LoRA 구간 샘플링"""

import numpy as np
import pytest

from app.core.errors import ValidationError
from app.core.tensor import Tape, Tensor, backward, no_grad, sum_
from app.services.denoiser import Context
from app.services.sampler import SamplerSettings, ancestral_sample, lora_window_sample, sample
from app.utils.rng import KeyedRng


@pytest.fixture
def x_T():
    return Tensor(KeyedRng(2).normal("x_T", (3, 8, 8)))


def _grads(params, schedule, x_T, settings):
    leaf = Tensor(x_T.data.copy(), requires_grad=True, name="x_T")
    wrt = dict(params.trainable(), x_T=leaf)
    with Tape() as tape:
        trace = sample(params, Context(2), leaf, schedule, settings)
        loss = sum_(trace.x0 * trace.x0)
    return trace, backward(tape, loss, wrt)


class TestTruncation:
    def test_k_equal_to_s_matches_full_chain(self, active_params, schedule5, x_T):
        full_trace, full = _grads(active_params, schedule5, x_T, SamplerSettings(guidance_w=2.0))
        k_trace, k_grads = _grads(active_params, schedule5, x_T, SamplerSettings(guidance_w=2.0, stop_grad_step=5))
        np.testing.assert_array_equal(full_trace.x0.data, k_trace.x0.data)
        for name in full:
            if name == "x_T":
                continue
            np.testing.assert_array_equal(full[name].data, k_grads[name].data)

    def test_truncation_keeps_forward_values(self, active_params, schedule5, x_T):
        with no_grad():
            full = sample(active_params, Context(2), x_T, schedule5, SamplerSettings(guidance_w=2.0))
        trace, _ = _grads(active_params, schedule5, x_T, SamplerSettings(guidance_w=2.0, stop_grad_step=2))
        np.testing.assert_allclose(trace.x0.data, full.x0.data, rtol=0, atol=1e-12)

    def test_no_gradient_reaches_x_T_below_s(self, active_params, schedule5, x_T):
        _, full = _grads(active_params, schedule5, x_T, SamplerSettings(guidance_w=2.0))
        _, short = _grads(active_params, schedule5, x_T, SamplerSettings(guidance_w=2.0, stop_grad_step=2))
        assert np.abs(full["x_T"].data).max() > 0
        np.testing.assert_array_equal(short["x_T"].data, 0.0)

    def test_truncate_returns_one_step_prediction(self, active_params, schedule5, x_T):
        with no_grad():
            trace = sample(active_params, Context(0), x_T, schedule5, SamplerSettings(guidance_w=1.0, t_truncate=3))
        assert trace.steps_run == [5, 4, 3]
        assert trace.final_step == 3
        np.testing.assert_array_equal(trace.x0.data, trace.xhat0_per_step[3].data)

    @pytest.mark.parametrize("settings", [
        SamplerSettings(stop_grad_step=0),
        SamplerSettings(stop_grad_step=6),
        SamplerSettings(t_truncate=6),
    ])
    def test_out_of_range_settings(self, active_params, schedule5, x_T, settings):
        with pytest.raises(ValidationError):
            sample(active_params, Context(0), x_T, schedule5, settings)


class TestCutLatent:
    @pytest.mark.parametrize("settings", [
        SamplerSettings(guidance_w=2.0, stop_grad_step=3),
        SamplerSettings(guidance_w=2.0, t_truncate=2),
    ])
    def test_reproduces_the_chain_from_the_cut(self, active_params, schedule5, x_T, settings):
        with no_grad():
            full = sample(active_params, Context(2), x_T, schedule5, settings)
            cut = settings.stop_grad_step or settings.t_truncate
            resumed = sample(active_params, Context(2), x_T, schedule5, settings, cut_latent=full.latents[cut])
        np.testing.assert_array_equal(resumed.x0.data, full.x0.data)

    def test_upper_chain_is_skipped(self, active_params, schedule5, x_T):
        settings = SamplerSettings(guidance_w=2.0, stop_grad_step=2)
        with no_grad():
            reference = sample(active_params, Context(2), x_T, schedule5, settings)
            other = sample(active_params, Context(2), Tensor(x_T.data * 0.0), schedule5, settings,
                           cut_latent=reference.latents[2])
        np.testing.assert_array_equal(other.x0.data, reference.x0.data)

    def test_requires_a_cut(self, active_params, schedule5, x_T):
        with pytest.raises(ValidationError):
            sample(active_params, Context(0), x_T, schedule5, SamplerSettings(), cut_latent=x_T)


class TestAncestral:
    def test_eta_zero_matches_ddim(self, active_params, schedule5, x_T):
        with no_grad():
            ddim = sample(active_params, Context(1), x_T, schedule5, SamplerSettings(guidance_w=2.0))
        anc = ancestral_sample(active_params, Context(1), x_T, schedule5, KeyedRng(0), guidance_w=2.0, eta=0.0)
        np.testing.assert_allclose(anc.x0.data, ddim.x0.data, rtol=1e-12, atol=1e-12)

    def test_noise_is_keyed(self, active_params, schedule5, x_T):
        def run(seed, index):
            return ancestral_sample(active_params, Context(1), x_T, schedule5, KeyedRng(seed), 2.0, index=index).x0.data

        np.testing.assert_array_equal(run(4, 0), run(4, 0))
        assert not np.array_equal(run(4, 0), run(4, 1))

    def test_without_injection_differs_from_ddim(self, active_params, schedule5, x_T):
        with no_grad():
            ddim = sample(active_params, Context(1), x_T, schedule5, SamplerSettings(guidance_w=2.0))
        quiet = ancestral_sample(active_params, Context(1), x_T, schedule5, KeyedRng(0), 2.0, inject_noise=False)
        assert np.all(np.isfinite(quiet.x0.data))
        assert not np.allclose(quiet.x0.data, ddim.x0.data)


class TestLoraWindow:
    def test_empty_window_is_base_model(self, active_params, schedule5, x_T):
        with no_grad():
            base = sample(active_params.base_only(), Context(3), x_T, schedule5, SamplerSettings(guidance_w=2.0))
        for window in ("start", "end"):
            out = lora_window_sample(active_params, Context(3), x_T, schedule5, window, 0, guidance_w=2.0)
            np.testing.assert_array_equal(out.x0.data, base.x0.data)

    def test_full_window_is_adapted_model(self, active_params, schedule5, x_T):
        with no_grad():
            adapted = sample(active_params.merged_form(), Context(3), x_T, schedule5, SamplerSettings(guidance_w=2.0))
        out = lora_window_sample(active_params, Context(3), x_T, schedule5, "end", 5, guidance_w=2.0)
        np.testing.assert_array_equal(out.x0.data, adapted.x0.data)

    def test_invalid_window(self, active_params, schedule5, x_T):
        with pytest.raises(ValidationError):
            lora_window_sample(active_params, Context(3), x_T, schedule5, "start", 6)
        with pytest.raises(ValidationError):
            lora_window_sample(active_params, Context(3), x_T, schedule5, "middle", 1)  # type: ignore[arg-type]
