"""Shared test oracles: finite-difference gradients and tiny probe models."""

import numpy as np
import torch

from conceptwm.diffusion import NoiseSchedule


def autograd_flat(loss_fn, params) -> np.ndarray:
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    return torch.cat([g.reshape(-1) for g in grads]).detach().numpy()


def central_diff_flat(loss_fn, params, h: float = 1e-5) -> np.ndarray:
    """Coordinate-wise central differences; mutates and restores params in place."""
    out = []
    with torch.no_grad():
        for p in params:
            flat = p.reshape(-1)
            g = np.zeros(flat.numel())
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(loss_fn())
                flat[i] = orig - h
                fm = float(loss_fn())
                flat[i] = orig
                g[i] = (fp - fm) / (2.0 * h)
            out.append(g)
    return np.concatenate(out)


def grad_rel_err(loss_fn, params, h: float = 1e-5) -> float:
    fd = central_diff_flat(loss_fn, params, h)
    ag = autograd_flat(loss_fn, params)
    return float(np.linalg.norm(fd - ag) / max(np.linalg.norm(fd), 1e-12))


class TinyDenoiser(torch.nn.Module):
    """Linear eps-predictor with a 4x4 weight (16 params), float64."""

    def __init__(self, seed: int = 0, scale: float = 0.3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.w = torch.nn.Parameter(
            torch.randn(4, 4, generator=gen, dtype=torch.float64) * scale
        )

    def forward(self, x, t, cond):
        b = x.shape[0]
        return (x.reshape(b, -1) @ self.w.T).reshape(x.shape)


class TinyModel:
    """Minimal ModelCheckpoint stand-in: schedule + predict + null cond."""

    def __init__(self, denoiser=None, T: int = 50, cond_dim: int = 2):
        self.schedule = NoiseSchedule.linear(T=T)
        self.denoiser = denoiser if denoiser is not None else TinyDenoiser()
        self._null = torch.zeros(cond_dim, dtype=torch.float64)

    def predict(self, x, t, cond):
        return self.denoiser(x, t, cond)

    def null_cond(self):
        return self._null
