"""
Training losses and evaluation metrics
"""

import math

import numpy as np
import pytest

from modules import losses
from modules.autodiff import gradcheck
from modules.errors import DimensionError
from modules.losses import LossWeights, fr_loss, l1_loss, psnr, residual_map, ssim_index, ssim_loss, total_loss
from modules.numerics import gaussian_taps
from tests.conftest import random_image


def naive_ssim(x, y, size=11, sigma=1.5):
    taps = gaussian_taps(size, sigma)
    window = np.outer(taps, taps)
    c1, c2 = 0.02 ** 2, 0.06 ** 2
    values = []
    for c in range(x.shape[0]):
        for i in range(x.shape[1] - size + 1):
            for j in range(x.shape[2] - size + 1):
                a = x[c, i:i + size, j:j + size]
                b = y[c, i:i + size, j:j + size]
                mx, my = (window * a).sum(), (window * b).sum()
                vx = (window * a * a).sum() - mx * mx
                vy = (window * b * b).sum() - my * my
                cov = (window * a * b).sum() - mx * my
                values.append((2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(values))


def dft(x):
    h, w = x.shape[-2:]
    fh = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fw = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    return fh @ x @ fw.T


def checkerboard(h, w, amplitude=0.5):
    return amplitude * np.where(np.add.outer(np.arange(h), np.arange(w)) % 2, 1.0, -1.0)[None]


class TestL1:
    def test_identical_images(self, rng):
        x = random_image(rng)
        assert l1_loss(x, x) == 0.0

    def test_constant_offset(self, rng):
        x = random_image(rng) * 0.5
        assert l1_loss(x + 0.1, x) == pytest.approx(0.1, abs=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            l1_loss(random_image(rng, h=8), random_image(rng, h=16))


class TestSSIM:
    def test_identical_images(self, rng):
        x = random_image(rng)
        assert ssim_index(x, x) == pytest.approx(1.0, abs=1e-9)
        assert ssim_loss(x, x) == pytest.approx(0.0, abs=1e-9)

    def test_symmetric(self, rng):
        x, y = random_image(rng), random_image(rng)
        assert ssim_index(x, y) == pytest.approx(ssim_index(y, x), abs=1e-12)

    def test_matches_windowed_oracle(self, rng):
        x, y = random_image(rng, h=16, w=14), random_image(rng, h=16, w=14)
        assert ssim_index(x, y) == pytest.approx(naive_ssim(x, y), abs=1e-8)

    def test_negated_texture(self):
        x = checkerboard(16, 16)
        loss = ssim_loss(x, -x)
        assert 1.0 < loss <= 2.0

    @pytest.mark.parametrize("h,w,expected", [(16, 16, 11), (16, 20, 11), (8, 8, 7), (6, 9, 5), (4, 4, 3)])
    def test_window_fits_image(self, h, w, expected):
        assert losses.ssim_window(h, w) == expected

    def test_small_image_uses_smaller_window(self, rng):
        x, y = random_image(rng, h=8, w=8), random_image(rng, h=8, w=8)
        assert ssim_index(x, y) == pytest.approx(naive_ssim(x, y, size=7), abs=1e-8)


class TestFrequencyLoss:
    def test_dc_shift(self, rng):
        x = random_image(rng)
        assert fr_loss(x + 0.3, x) == pytest.approx(0.3 / 256, rel=1e-9)

    def test_matches_direct_dft(self, rng):
        x, y = random_image(rng, c=2, h=6, w=10), random_image(rng, c=2, h=6, w=10)
        spectrum = dft(x - y)
        expected = (np.abs(spectrum.real).sum() + np.abs(spectrum.imag).sum()) / (2 * 60 * 60)
        assert fr_loss(x, y) == pytest.approx(expected, abs=1e-9)

    def test_symmetric(self, rng):
        x, y = random_image(rng), random_image(rng)
        assert fr_loss(x, y) == fr_loss(y, x)

    def test_identical_images(self, rng):
        x = random_image(rng)
        assert fr_loss(x, x) == 0.0

    def test_gradient(self, rng):
        target = random_image(rng, h=5, w=5)
        assert gradcheck(lambda x: losses.fr_term(x, target), random_image(rng, h=5, w=5)).passed

    @pytest.mark.parametrize("seed", range(20))
    def test_quarter_period_shift_of_both_inputs(self, seed):
        # phases of multiples of pi/2 swap or negate Re and Im
        rng = np.random.default_rng(seed)
        x, y = rng.uniform(-1, 1, (2, 2, 8, 8))
        dy, dx = 2 * rng.integers(0, 4, size=2)
        shifted = fr_loss(np.roll(x, (dy, dx), axis=(1, 2)), np.roll(y, (dy, dx), axis=(1, 2)))
        assert shifted == pytest.approx(fr_loss(x, y), rel=1e-9)

    @pytest.mark.parametrize("seed", range(20))
    def test_any_shift_of_both_inputs_is_bounded(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.uniform(-1, 1, (2, 1, 7, 9))
        dy, dx = rng.integers(0, 9, size=2)
        base = fr_loss(x, y)
        shifted = fr_loss(np.roll(x, (dy, dx), axis=(1, 2)), np.roll(y, (dy, dx), axis=(1, 2)))
        assert base / math.sqrt(2) - 1e-12 <= shifted <= base * math.sqrt(2) + 1e-12

    def test_odd_shift_changes_loss(self):
        x = np.zeros((1, 1, 8))
        x[0, 0, 0] = 1.0
        zero = np.zeros_like(x)
        assert fr_loss(x, zero) == pytest.approx(8 / 64)
        assert fr_loss(np.roll(x, 1, axis=2), zero) == pytest.approx((4 + 4 * math.sqrt(2)) / 64)


class TestTotal:
    def test_decomposition(self, rng):
        x, y = random_image(rng), random_image(rng)
        report = total_loss(x, y, LossWeights(lambda1=0.1, lambda2=0.05))
        expected = report.l1 + 0.1 * report.ssim_loss + 0.05 * report.fr
        assert report.total == pytest.approx(expected, abs=1e-12)
        assert report.l1 == pytest.approx(l1_loss(x, y), abs=1e-15)
        assert set(report.as_dict()) == {"l1", "ssim_loss", "fr", "total"}

    def test_zero_weights_leave_l1(self, rng):
        x, y = random_image(rng), random_image(rng)
        report = total_loss(x, y, LossWeights(lambda1=0.0, lambda2=0.0))
        assert report.total == pytest.approx(report.l1, abs=1e-15)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-0.1)

    def test_gradient(self, rng):
        target = np.clip(rng.standard_normal((1, 8, 8)) * 0.4, -0.9, 0.9)
        point = np.clip(rng.standard_normal((1, 8, 8)) * 0.4, -0.9, 0.9)
        assert gradcheck(lambda x: losses.total_term(x, target).node, point).passed


class TestMetrics:
    def test_psnr_of_offset(self, rng):
        x = random_image(rng) * 0.5
        assert psnr(x + 0.2, x) == pytest.approx(20.0, abs=1e-9)

    def test_psnr_identical_is_infinite(self, rng):
        x = random_image(rng)
        assert math.isinf(psnr(x, x))

    def test_residual_of_identical_images(self, rng):
        x = random_image(rng)
        np.testing.assert_array_equal(residual_map(x, x), np.zeros_like(x))

    def test_residual_hot_pixel(self):
        hr = np.zeros((1, 4, 4))
        sr = hr.copy()
        sr[0, 2, 1] = 0.25
        out = residual_map(sr, hr)
        assert out[0, 2, 1] == 1.0
        assert out.sum() == 1.0

    def test_residual_mean_is_l1(self, rng):
        x, y = random_image(rng), random_image(rng)
        assert residual_map(x, y, normalize=False).mean() == pytest.approx(l1_loss(x, y), abs=1e-15)
