"""Attack transforms: the eight evaluation attacks plus the pretraining
distortion layer. Every distortion maps [0,1] images to [0,1] images of the
same shape; training forms are differentiable (JPEG via soft quantization of
8x8 block transforms), evaluation JPEG does a real encode/decode round trip.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import DistortionDefaults
from .errors import ConfigError, ValidationError
from .rng import RngStream

TABLE2_LABELS = {
    "contrast": "Contrast",
    "brightness": "Brightness",
    "blur": "Blur",
    "gaussian_noise": "Noise",
    "jpeg": "Jpeg",
    "crop_scale": "C.&R.",
    "vae_compress": "Vae.C",
    "diffusion_regen": "Denoising",
    "random_mask": "Random Mask",
    "combination": "Combination",
    "identity": "Identity",
}


@dataclass
class DistortionSpec:
    kind: str
    params: dict = field(default_factory=dict)
    differentiable: bool = True
    members: list["DistortionSpec"] = field(default_factory=list)
    runtime: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def label(self) -> str:
        if self.kind not in TABLE2_LABELS:
            raise ConfigError(f"unknown distortion kind {self.kind!r}")
        return TABLE2_LABELS[self.kind]

    def to_config(self) -> dict:
        out = {"kind": self.kind, "params": dict(self.params), "differentiable": self.differentiable}
        if self.members:
            out["members"] = [m.to_config() for m in self.members]
        return out


def _check_range(name: str, value, lo, hi):
    if not (lo <= value <= hi):
        raise ConfigError(f"{name}={value} outside [{lo}, {hi}]")


def _gauss_kernel(sigma: float, size: int, dtype) -> torch.Tensor:
    xs = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(xs**2) / (2.0 * sigma**2))
    k = torch.outer(g, g)
    return (k / k.sum()).to(dtype)


def _blur(x: torch.Tensor, sigma: float, size: int) -> torch.Tensor:
    k = _gauss_kernel(sigma, size, x.dtype)[None, None].expand(x.shape[1], 1, size, size)
    pad = size // 2
    return F.conv2d(F.pad(x, (pad,) * 4, mode="reflect"), k, groups=x.shape[1])


# ---------------------------------------------------------------------------
# differentiable JPEG

_DCT8 = None
_Q_LUMA = torch.tensor(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=torch.float64,
)
_Q_CHROMA = torch.tensor(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=torch.float64,
)


def _dct_matrix(dtype) -> torch.Tensor:
    global _DCT8
    if _DCT8 is None:
        n = 8
        m = np.zeros((n, n))
        for k in range(n):
            for i in range(n):
                m[k, i] = math.cos(math.pi * k * (2 * i + 1) / (2 * n)) * math.sqrt(2 / n)
        m[0] *= 1 / math.sqrt(2)
        _DCT8 = torch.from_numpy(m)
    return _DCT8.to(dtype)


def _quality_tables(quality: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    qs = []
    for base in (_Q_LUMA, _Q_CHROMA):
        t = torch.floor((base * scale + 50.0) / 100.0).clamp(1.0, 255.0)
        qs.append(t.to(dtype))
    return qs[0], qs[1]


def _soft_round(v: torch.Tensor) -> torch.Tensor:
    return v - torch.sin(2.0 * math.pi * v) / (2.0 * math.pi)


def _rgb_to_ycbcr(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 0.5
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 0.5
    return torch.stack([y, cb, cr], dim=1)


def _ycbcr_to_rgb(x: torch.Tensor) -> torch.Tensor:
    y, cb, cr = x[:, 0], x[:, 1] - 0.5, x[:, 2] - 0.5
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return torch.stack([r, g, b], dim=1)


def _blockify(x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
    b, c, h, w = x.shape
    blocks = x.reshape(b, c, h // 8, 8, w // 8, 8).permute(0, 1, 2, 4, 3, 5)
    return blocks.reshape(-1, 8, 8), h, w


def _unblockify(blocks: torch.Tensor, b: int, c: int, h: int, w: int) -> torch.Tensor:
    x = blocks.reshape(b, c, h // 8, w // 8, 8, 8).permute(0, 1, 2, 4, 3, 5)
    return x.reshape(b, c, h, w)


def jpeg_soft(x: torch.Tensor, quality: int) -> torch.Tensor:
    """Differentiable JPEG: block DCT, soft quantization, inverse transform."""
    b, c, h, w = x.shape
    pad_h, pad_w = (-h) % 8, (-w) % 8
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    ycc = _rgb_to_ycbcr(x) * 255.0 - 128.0
    d = _dct_matrix(x.dtype)
    q_luma, q_chroma = _quality_tables(quality, x.dtype)
    blocks, hh, ww = _blockify(ycc)
    coeff = d @ blocks @ d.T
    # regroup channel-major so luma/chroma tables line up with their blocks
    coeff = coeff.reshape(x.shape[0], 3, -1, 8, 8).transpose(0, 1).reshape(-1, 8, 8)
    q = torch.cat(
        [
            q_luma.expand(coeff.shape[0] // 3, 8, 8),
            q_chroma.expand(2 * (coeff.shape[0] // 3), 8, 8),
        ]
    )
    deq = _soft_round(coeff / q) * q
    deq = deq.reshape(3, x.shape[0], -1, 8, 8).transpose(0, 1).reshape(-1, 8, 8)
    rec = d.T @ deq @ d
    ycc_rec = _unblockify(rec, x.shape[0], 3, hh, ww)
    out = _ycbcr_to_rgb((ycc_rec + 128.0) / 255.0)
    if pad_h or pad_w:
        out = out[..., :h, :w]
    return out.clamp(0.0, 1.0)


def jpeg_real(x: torch.Tensor, quality: int) -> torch.Tensor:
    """Exact JPEG round trip through the reference encoder."""
    outs = []
    arr = (x.detach().clamp(0, 1).cpu().numpy() * 255.0).round().astype(np.uint8)
    for img in arr:
        buf = io.BytesIO()
        Image.fromarray(img.transpose(1, 2, 0)).save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        dec = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
        outs.append(torch.from_numpy(dec.transpose(2, 0, 1)))
    return torch.stack(outs).to(x.dtype)


# ---------------------------------------------------------------------------
# dispatcher


def apply_distortion(spec: DistortionSpec, image: torch.Tensor, rng: RngStream) -> torch.Tensor:
    """Apply one distortion; output is clamped to [0,1] and keeps the shape."""
    if image.ndim != 4:
        raise ValidationError(f"expected (B,C,H,W), got {tuple(image.shape)}")
    x = image
    b, c, h, w = x.shape
    kind = spec.kind
    p = spec.params

    if kind == "identity":
        return x.clamp(0.0, 1.0)

    if kind == "brightness":
        delta = float(p.get("delta", 0.3))
        _check_range("brightness delta", delta, 0.0, 1.0)
        shift = (rng.rand(b, 1, 1, 1).to(x.dtype) * 2.0 - 1.0) * delta
        return (x + shift).clamp(0.0, 1.0)

    if kind == "contrast":
        lo, hi = float(p.get("lo", 0.5)), float(p.get("hi", 1.5))
        if not (0.0 < lo <= hi):
            raise ConfigError(f"bad contrast range [{lo}, {hi}]")
        factor = lo + (hi - lo) * rng.rand(b, 1, 1, 1).to(x.dtype)
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        return (mean + factor * (x - mean)).clamp(0.0, 1.0)

    if kind == "blur":
        sigma = float(p.get("sigma", 1.0))
        size = int(p.get("kernel", 5))
        if sigma <= 0 or size % 2 != 1:
            raise ConfigError(f"blur needs sigma>0 and odd kernel, got {sigma}, {size}")
        return _blur(x, sigma, size).clamp(0.0, 1.0)

    if kind == "gaussian_noise":
        std = float(p.get("std", 0.05))
        _check_range("noise std", std, 0.0, 1.0)
        return (x + std * rng.randn(*x.shape, dtype=x.dtype)).clamp(0.0, 1.0)

    if kind == "jpeg":
        quality = int(p.get("quality", 50))
        _check_range("jpeg quality", quality, 1, 100)
        if spec.differentiable:
            return jpeg_soft(x, quality)
        return jpeg_real(x, quality)

    if kind == "crop_scale":
        frac = float(p.get("fraction", 0.7))
        if not (0.0 < frac <= 1.0):
            raise ConfigError(f"crop fraction {frac} outside (0,1]")
        side_h = max(1, round(frac * h))
        side_w = max(1, round(frac * w))
        if side_h == h and side_w == w:
            return x.clamp(0.0, 1.0)
        top = rng.choice(h - side_h + 1)
        left = rng.choice(w - side_w + 1)
        cropped = x[..., top : top + side_h, left : left + side_w]
        out = F.interpolate(cropped, size=(h, w), mode="bilinear", align_corners=False)
        return out.clamp(0.0, 1.0)

    if kind == "random_mask":
        frac = float(p.get("fraction", 0.1))
        _check_range("mask fraction", frac, 0.0, 0.99)
        if frac == 0.0:
            return x.clamp(0.0, 1.0)
        side = max(1, round(math.sqrt(frac) * math.sqrt(h * w)))
        side = min(side, h, w)
        top = rng.choice(h - side + 1)
        left = rng.choice(w - side + 1)
        mask = torch.ones(1, 1, h, w, dtype=x.dtype)
        mask[..., top : top + side, left : left + side] = 0.0
        return (x * mask).clamp(0.0, 1.0)

    if kind == "vae_compress":
        backend = spec.runtime.get("backend")
        if backend is None:
            raise ConfigError("vae_compress spec has no bound latent backend")
        return backend.decode(backend.encode(x)).clamp(0.0, 1.0)

    if kind == "diffusion_regen":
        model = spec.runtime.get("model")
        backend = spec.runtime.get("backend")
        if model is None or backend is None:
            raise ConfigError("diffusion_regen spec needs a bound model and backend")
        frac = float(p.get("fraction", 0.15))
        _check_range("regen fraction", frac, 0.0, 0.95)
        t_start = round(frac * model.schedule.T)
        if t_start <= 0:
            return x.clamp(0.0, 1.0)
        steps = int(p.get("steps", 12))
        from .diffusion import q_sample, sample_latents

        with torch.no_grad():
            z = backend.encode(x)
            eps = rng.randn(*z.shape, dtype=z.dtype)
            z_t = q_sample(z, min(t_start, model.schedule.T - 1), eps, model.schedule)
            z0 = sample_latents(
                model,
                model.null_cond(),
                x.shape[0],
                tuple(z.shape[1:]),
                rng.child("regen"),
                sampler="ddim",
                steps=steps,
                guidance_scale=1.0,
                x_init=z_t,
                t_start=min(t_start, model.schedule.T - 1),
            )
            return backend.decode(z0).clamp(0.0, 1.0)

    if kind == "combination":
        if not spec.members:
            raise ConfigError("combination spec has no members")
        out = x
        for i, member in enumerate(spec.members):
            out = apply_distortion(member, out, rng.child(f"m{i}"))
        return out

    raise ConfigError(f"unknown distortion kind {kind!r}")


# ---------------------------------------------------------------------------
# suites


def standard_suite(
    profile: str, defaults: DistortionDefaults | None = None
) -> list[DistortionSpec]:
    """Named distortion suites with the frozen default parameters.

    ``table2`` is the 8-attack evaluation suite in column order;
    ``table5_pretrain`` is the 7-member differentiable pretraining layer
    (the color-jitter row maps onto the brightness kind).
    """
    d = defaults or DistortionDefaults()
    brightness = DistortionSpec("brightness", {"delta": d.brightness_delta})
    contrast = DistortionSpec("contrast", {"lo": d.contrast_lo, "hi": d.contrast_hi})
    blur = DistortionSpec("blur", {"sigma": d.blur_sigma, "kernel": d.blur_kernel})
    noise = DistortionSpec("gaussian_noise", {"std": d.noise_std})
    crop = DistortionSpec("crop_scale", {"fraction": d.crop_fraction})
    mask = DistortionSpec("random_mask", {"fraction": d.mask_fraction})

    if profile == "table2":
        return [
            contrast,
            brightness,
            blur,
            noise,
            DistortionSpec("jpeg", {"quality": d.jpeg_quality}, differentiable=False),
            crop,
            DistortionSpec("vae_compress", {}),
            DistortionSpec(
                "diffusion_regen", {"fraction": d.regen_fraction, "steps": 12},
                differentiable=False,
            ),
        ]
    if profile == "table5_pretrain":
        members = [
            noise,
            brightness,
            blur,
            DistortionSpec("jpeg", {"quality": d.jpeg_quality}, differentiable=True),
            crop,
            mask,
        ]
        return members + [DistortionSpec("combination", {}, members=list(members))]
    raise ConfigError(f"unknown suite profile {profile!r}")


def sample_combination(specs: list[DistortionSpec], rng: RngStream) -> DistortionSpec:
    """Compose 2-3 distinct members (fewer if the pool is smaller) in random order."""
    if not specs:
        raise ValidationError("cannot sample a combination from an empty list")
    n = len(specs)
    m = min(n, 2 + rng.choice(2))
    order = rng.permutation(n).tolist()[:m]
    return DistortionSpec("combination", {}, members=[specs[i] for i in order])
