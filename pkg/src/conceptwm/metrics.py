"""Reference image quality metrics (PSNR, SSIM) on [0,1] images.

Computed in float64. SSIM uses an 11x11 Gaussian window (sigma 1.5) with
symmetric boundary handling and stabilizers c1=(0.01)^2, c2=(0.03)^2 on
unit dynamic range.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from scipy import ndimage

from .errors import DimensionError

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _to_f64(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _to_f64(a), _to_f64(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical inputs."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * math.log10(mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian kernel."""
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g1 = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g1, g1)
    return win / win.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray, win: np.ndarray) -> np.ndarray:
    # symmetric boundary ("reflect" in scipy terms) keeps edge statistics sane
    f = lambda img: ndimage.correlate(img, win, mode="reflect")
    mu_a, mu_b = f(a), f(b)
    var_a = f(a * a) - mu_a**2
    var_b = f(b * b) - mu_b**2
    cov = f(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    """Mean structural similarity over channels (and batch, if present)."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim == 3:
        a, b = a[None], b[None]
    if a.ndim != 4:
        raise DimensionError(f"expected (H,W), (C,H,W) or (B,C,H,W), got {a.shape}")
    win = gaussian_window()
    maps = [
        _ssim_channel(a[i, c], b[i, c], win)
        for i in range(a.shape[0])
        for c in range(a.shape[1])
    ]
    return float(np.mean(maps))
