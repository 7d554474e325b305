import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptwm.errors import DimensionError
from conceptwm.metrics import SSIM_C1, SSIM_C2, gaussian_window, psnr, ssim


def test_psnr_identical_capped():
    a = np.random.default_rng(0).random((3, 16, 16))
    assert psnr(a, a) == 100.0


def test_psnr_uniform_offset_analytic():
    a = np.full((3, 8, 8), 0.4)
    b = a + 1.0 / 255.0
    assert psnr(a, b) == pytest.approx(20.0 * math.log10(255.0), abs=1e-9)


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((3, 8, 8)), np.zeros((3, 8, 9)))


def test_ssim_identical_and_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.random((3, 12, 12)), rng.random((3, 12, 12))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def brute_force_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Direct per-pixel windowed statistics with symmetric boundary indexing."""
    win = gaussian_window()
    half = win.shape[0] // 2
    vals = []
    for c in range(a.shape[0]):
        pa = np.pad(a[c], half, mode="symmetric")
        pb = np.pad(b[c], half, mode="symmetric")
        h, w = a.shape[1:]
        for i in range(h):
            for j in range(w):
                wa = pa[i : i + 2 * half + 1, j : j + 2 * half + 1]
                wb = pb[i : i + 2 * half + 1, j : j + 2 * half + 1]
                mu_a = float((win * wa).sum())
                mu_b = float((win * wb).sum())
                var_a = float((win * wa * wa).sum()) - mu_a**2
                var_b = float((win * wb * wb).sum()) - mu_b**2
                cov = float((win * wa * wb).sum()) - mu_a * mu_b
                num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
                den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
                vals.append(num / den)
    return float(np.mean(vals))


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=8, deadline=None)
def test_ssim_matches_brute_force_small_images(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((2, 7, 8))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(brute_force_ssim(a, b), abs=1e-9)


def brute_force_psnr(a, b) -> float:
    se = 0.0
    count = 0
    for x, y in zip(a.ravel(), b.ravel()):
        se += (float(x) - float(y)) ** 2
        count += 1
    return -10.0 * math.log10(se / count)


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=8, deadline=None)
def test_psnr_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((3, 6, 6))
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    assert psnr(a, b) == pytest.approx(brute_force_psnr(a, b), abs=1e-9)
