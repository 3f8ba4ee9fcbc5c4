"""미분 가능한 JPEG 왕복"""

import math

import numpy as np
import pytest

from app.core.errors import ShapeError, ValidationError
from app.core.gradcheck import finite_diff_check_leaves
from app.core.tensor import Tensor, no_grad
from app.services.jpeg import dct_matrix, jpeg_roundtrip, psnr, quality_scale, quant_tables
from app.services.rewards import jpeg_reward


def _ramp(size: int = 16) -> np.ndarray:
    i, j = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    ramp = 0.2 + 0.6 * (i + j) / (2 * (size - 1))
    return np.stack([ramp, ramp[::-1], 1.0 - ramp])


def test_dct_is_orthonormal():
    d = dct_matrix()
    np.testing.assert_allclose(d @ d.T, np.eye(8), atol=1e-12)


@pytest.mark.parametrize("quality,scale", [(10, 500.0), (50, 100.0), (90, 20.0)])
def test_quality_scaling(quality, scale):
    assert quality_scale(quality) == pytest.approx(scale)


def test_tables_are_clamped():
    y, c = quant_tables(95)
    assert y.min() >= 1 and c.min() >= 1
    y, c = quant_tables(10)
    assert y.max() <= 255 and c.max() <= 255


def test_quality_out_of_range():
    with pytest.raises(ValidationError):
        quality_scale(0)


def test_constant_image_survives(f64):
    flat = Tensor(np.full((3, 16, 16), 0.37))
    with no_grad():
        clamped, recon = jpeg_roundtrip(flat, 50)
    np.testing.assert_allclose(recon.data, clamped.data, atol=1e-9)


def test_smooth_image_psnr(f64):
    image = _ramp()
    with no_grad():
        _, recon = jpeg_roundtrip(Tensor(image), 50)
    value = psnr(image, recon.data)
    assert value >= 25.0
    assert psnr(image, image) == math.inf


def test_higher_quality_is_closer(f64):
    image = np.random.default_rng(0).uniform(0.1, 0.9, size=(3, 8, 8))
    with no_grad():
        low = jpeg_reward(Tensor(image), 20).item()
        high = jpeg_reward(Tensor(image), 90).item()
    assert low < high <= 0.0


def test_input_is_clamped(f64):
    image = np.full((3, 8, 8), 1.5)
    with no_grad():
        clamped, _ = jpeg_roundtrip(Tensor(image), 50)
    np.testing.assert_array_equal(clamped.data, 1.0)


def test_shape_checks():
    with pytest.raises(ShapeError):
        jpeg_roundtrip(Tensor(np.zeros((3, 12, 12))))
    with pytest.raises(ShapeError):
        jpeg_roundtrip(Tensor(np.zeros((1, 8, 8))))


def test_exact_rounding_gradient_matches_finite_difference(f64):
    image = Tensor(np.random.default_rng(4).uniform(0.2, 0.8, size=(3, 8, 8)))
    worst, _ = finite_diff_check_leaves(
        lambda: jpeg_reward(image, 50, "exact"),
        {"image": image},
        eps=1e-7,
        floor=1e-6,
        coords={"image": [0, 9, 63, 70, 130, 191]},
    )
    assert worst < 1e-4


def test_noise_is_less_compressible_than_flat_image():
    flat = np.full((3, 8, 8), 0.5)
    noise = np.random.default_rng(6).uniform(0.0, 1.0, size=(3, 8, 8))
    with no_grad():
        flat_score = jpeg_reward(Tensor(flat), 50).item()
        noise_score = jpeg_reward(Tensor(noise), 50).item()
    assert noise_score < flat_score
    assert flat_score <= 0.0
