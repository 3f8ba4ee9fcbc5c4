"""공용 fixture: 마이크로 denoiser, 짧은 스케줄, 64비트 정밀도"""

from pathlib import Path

import pytest

from app.core.tensor import get_precision, set_precision
from app.schemas.config import ArchitectureConfig, FinetuneConfig, RewardSpec
from app.services.denoiser import DenoiserParams, attach_adapters, init_denoiser, save_denoiser
from app.services.pipeline import micro_model
from app.services.rewards import build_reward
from app.services.schedule import NoiseSchedule, make_schedule

MICRO = ArchitectureConfig(image_size=8, channels=4, n_blocks=1, emb_dim=4)


@pytest.fixture(autouse=True)
def restore_precision():
    """테스트가 바꾼 전역 정밀도를 되돌린다"""
    previous = get_precision()
    yield
    set_precision(previous)


@pytest.fixture
def f64():
    set_precision("f64")
    yield


@pytest.fixture
def micro_spec() -> ArchitectureConfig:
    return MICRO


@pytest.fixture
def schedule5() -> NoiseSchedule:
    return make_schedule(1000, 5)


@pytest.fixture
def base_params(micro_spec: ArchitectureConfig) -> DenoiserParams:
    return init_denoiser(micro_spec, seed=3)


@pytest.fixture
def lora_params(base_params: DenoiserParams) -> DenoiserParams:
    """B = 0으로 갓 붙인 어댑터"""
    return attach_adapters(base_params, rank=2, seed=3)


@pytest.fixture
def active_params(f64) -> DenoiserParams:
    """B ≠ 0 어댑터가 붙은 64비트 마이크로 모델"""
    return micro_model(seed=5)


@pytest.fixture
def rotation_rewards():
    return [(build_reward("rotation"), 1.0)]


@pytest.fixture
def jpeg_rewards():
    return [(build_reward("jpeg"), 1.0)]


def ft_config(**updates) -> FinetuneConfig:
    """마이크로 실험용 FinetuneConfig"""
    fields = dict(
        seed=11,
        sampler_steps=5,
        guidance_w=2.0,
        batch=2,
        steps=2,
        lora_rank=2,
        m=5,
        rewards=[RewardSpec(name="rotation")],
        log_every=1,
    )
    fields.update(updates)
    return FinetuneConfig(**fields)


@pytest.fixture
def denoiser_ckpt(tmp_path: Path, base_params: DenoiserParams) -> Path:
    path = tmp_path / "denoiser.ckpt"
    save_denoiser(str(path), base_params, make_schedule(1000, 3))
    return path
