"""K 진단, 추정량 분산, 클리핑 ablation"""

import logging
import math

import numpy as np
import pytest

from app.core.errors import ValidationError
from app.core.tensor import Tensor
from app.schemas.config import DiagConfig, FinetuneMode
from app.services.denoiser import Context
from app.services.diagnostics import (
    clip_ablation,
    finetune_config_from,
    flatten_grads,
    grad_angle,
    gradient_variance,
    k_diagnostics,
    k_trend,
    plot_k_trend,
    variance_report,
)
from app.services.pipeline import micro_model
from tests.conftest import ft_config

CONTEXTS = [Context(0), Context(3)]


def _diag(**updates) -> DiagConfig:
    fields = dict(seed=3, sampler_steps=5, guidance_w=2.0, rewards="rotation", lora_rank=2,
                  k_list=[1, 2, 5], n_batches=2, batch=1)
    fields.update(updates)
    return DiagConfig(**fields)


class TestVectors:
    def test_angles(self):
        a = np.array([1.0, 0.0])
        assert grad_angle(a, 3 * a) == pytest.approx(0.0)
        assert grad_angle(a, np.array([0.0, 2.0])) == pytest.approx(math.pi / 2)
        assert grad_angle(a, -a) == pytest.approx(math.pi)
        assert grad_angle(a, np.zeros(2)) is None

    def test_flatten_uses_name_order(self):
        grads = {"b": Tensor(np.array([3.0])), "a": Tensor(np.array([[1.0, 2.0]]))}
        np.testing.assert_array_equal(flatten_grads(grads), [1.0, 2.0, 3.0])
        assert flatten_grads({}).size == 0


def test_config_bridge_disables_kl():
    config = finetune_config_from(_diag(), mode=FinetuneMode.DRAFT_K, K=2)
    assert config.beta_kl == 0.0
    assert config.sampler_steps == 5 and config.K == 2
    assert [r.name for r in config.rewards] == ["rotation"]


def test_k_diagnostics_rows(active_params, schedule5, rotation_rewards):
    rows = k_diagnostics(active_params, CONTEXTS, [1, 2, 5], schedule5, rotation_rewards, ft_config())
    assert [r.K for r in rows] == [1, 2, 5]
    assert rows[0].angle_to_k1 == pytest.approx(0.0, abs=1e-6)
    assert all(r.grad_norm > 0 for r in rows)
    assert all(r.angle_to_k1 is not None and 0.0 <= r.angle_to_k1 <= math.pi for r in rows)


def test_k_diagnostics_rejects_k_outside_chain(active_params, schedule5, rotation_rewards):
    with pytest.raises(ValidationError):
        k_diagnostics(active_params, CONTEXTS, [6], schedule5, rotation_rewards, ft_config())


def test_k_trend_and_plot(tmp_path, active_params, schedule5, rotation_rewards):
    rows = k_trend(active_params, _diag(), schedule5, rotation_rewards)
    assert [r.K for r in rows] == [1, 2, 5]
    assert all(r.median_grad_norm is not None for r in rows)
    path = plot_k_trend(rows, tmp_path / "plots" / "k_trend.png")
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_variance_needs_two_resamples(active_params, schedule5, rotation_rewards):
    with pytest.raises(ValidationError):
        gradient_variance(active_params, ft_config(), CONTEXTS, schedule5, rotation_rewards, n_resamples=1)


def test_variance_report_without_inner_samples(active_params, schedule5, rotation_rewards):
    records: list = []
    handler = logging.Handler(logging.WARNING)
    handler.emit = records.append
    diag_logger = logging.getLogger("app.services.diagnostics")
    diag_logger.addHandler(handler)
    try:
        report = variance_report(active_params, ft_config(n=0), CONTEXTS[:1], schedule5, rotation_rewards, 3)
    finally:
        diag_logger.removeHandler(handler)
    assert report.draft_1 > 0.0
    assert report.lv == report.draft_1
    assert report.ratio == 1.0 and not report.reduced
    assert any("DIAG_VAR" in r.getMessage() for r in records)


@pytest.mark.slow
def test_averaged_lv_report_over_64_resamples(schedule5, rotation_rewards, f64):
    params = micro_model(5, gain=1.0)
    report = variance_report(params, ft_config(n=2), CONTEXTS[:1], schedule5, rotation_rewards, 64)
    assert report.resamples == 64 and report.n == 2
    assert np.isfinite(report.lv) and report.lv > 0.0 and report.draft_1 > 0.0
    assert report.ratio == pytest.approx(report.draft_1 / report.lv)
    assert report.reduced == (report.lv < report.draft_1)


def test_variance_report_ignores_the_sum_setting(active_params, schedule5, rotation_rewards):
    summed = variance_report(active_params, ft_config(n=2, normalize_lv=False), CONTEXTS[:1], schedule5,
                             rotation_rewards, 3)
    averaged = variance_report(active_params, ft_config(n=2, normalize_lv=True), CONTEXTS[:1], schedule5,
                               rotation_rewards, 3)
    assert summed.lv == averaged.lv
    assert summed.reduced == (summed.lv < summed.draft_1)


def test_clip_ablation_grid(schedule5, rotation_rewards, f64):
    base = micro_model(5).base_only()
    rows = clip_ablation(base, _diag(k_list=[1], clip_list=[0.01, 100.0], ablation_steps=2), schedule5,
                         rotation_rewards)
    assert [(r.K, r.clip_norm) for r in rows] == [(1, 0.01), (1, 100.0)]
    assert all(np.isfinite(r.first_reward) and np.isfinite(r.final_reward) for r in rows)
    assert not base.adapters
