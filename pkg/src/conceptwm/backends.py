"""Latent backends: an exactly invertible orthogonal transform and a learned
conv autoencoder (with an optional independently trained alternate decoder,
used by the decoder-swap ablation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, TrainingError, ValidationError
from .rng import RngStream


class OrthogonalBackend:
    """Lossless linear backend: space-to-depth then a fixed orthogonal channel mix.

    decode(encode(x)) == x up to float32 rounding; encode is linear, so a zero
    image maps to a zero latent. Latent shape for HxW pixels is
    (3*block^2, H/block, W/block).
    """

    kind = "fixed_orthogonal"

    def __init__(self, block: int = 4, seed: int = 7):
        self.block = block
        self.seed = seed
        d = 3 * block * block
        gen = torch.Generator().manual_seed(seed)
        m = torch.randn(d, d, generator=gen, dtype=torch.float64)
        q, r = torch.linalg.qr(m)
        q = q * torch.sign(torch.diagonal(r))[None, :]  # fix column signs
        self.q = q.to(torch.float32)
        self.latent_channels = d

    def latent_shape(self, size: int) -> tuple[int, int, int]:
        if size % self.block:
            raise DimensionError(f"size {size} not divisible by block {self.block}")
        return (self.latent_channels, size // self.block, size // self.block)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != 3:
            raise DimensionError(f"expected 3-channel images, got {tuple(x.shape)}")
        s = F.pixel_unshuffle(x, self.block)
        return torch.einsum("oc,bchw->bohw", self.q.to(x.dtype), s)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.latent_channels:
            raise DimensionError(f"expected {self.latent_channels} latent channels")
        s = torch.einsum("co,bchw->bohw", self.q.to(z.dtype), z)
        return F.pixel_shuffle(s, self.block)


class ConvEncoder(nn.Module):
    def __init__(self, latent_channels: int = 4, hidden: int = 48):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, hidden, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * hidden, 2 * hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * hidden, latent_channels, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class ConvDecoder(nn.Module):
    def __init__(self, latent_channels: int = 4, hidden: int = 48):
        super().__init__()
        self.head = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * hidden, 2 * hidden, 3, padding=1),
            nn.SiLU(),
        )
        self.mid = nn.Sequential(nn.Conv2d(2 * hidden, hidden, 3, padding=1), nn.SiLU())
        self.out = nn.Conv2d(hidden, 3, 3, padding=1)

    def forward(self, z):
        h = self.head(z)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.mid(h)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.out(h))


@dataclass
class LearnedBackend:
    """Trained autoencoder with frozen per-channel latent standardization."""

    encoder: ConvEncoder
    decoder: ConvDecoder
    latent_mean: torch.Tensor  # (C,)
    latent_std: torch.Tensor  # (C,)
    tag: str = "primary"
    meta: dict = field(default_factory=dict)
    kind: str = "learned_autoencoder"

    @property
    def latent_channels(self) -> int:
        return int(self.latent_mean.shape[0])

    def latent_shape(self, size: int) -> tuple[int, int, int]:
        if size % 4:
            raise DimensionError(f"size {size} not divisible by 4")
        return (self.latent_channels, size // 4, size // 4)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != 3:
            raise DimensionError(f"expected 3-channel images, got {tuple(x.shape)}")
        z = self.encoder(x)
        return (z - self.latent_mean[:, None, None]) / self.latent_std[:, None, None]

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.latent_channels:
            raise DimensionError(f"expected {self.latent_channels} latent channels")
        return self.decoder(z * self.latent_std[:, None, None] + self.latent_mean[:, None, None])

    def with_decoder(self, decoder: ConvDecoder, tag: str) -> "LearnedBackend":
        return LearnedBackend(
            encoder=self.encoder,
            decoder=decoder,
            latent_mean=self.latent_mean,
            latent_std=self.latent_std,
            tag=tag,
            meta=dict(self.meta),
        )

    def freeze(self) -> "LearnedBackend":
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        for p in self.decoder.parameters():
            p.requires_grad_(False)
        return self


def train_autoencoder(
    images: torch.Tensor,
    rng: RngStream,
    latent_channels: int = 4,
    hidden: int = 48,
    steps: int = 1200,
    batch_size: int = 32,
    lr: float = 2e-3,
) -> LearnedBackend:
    """Reconstruction-trained backend; latent statistics frozen afterwards."""
    if images.shape[0] == 0:
        raise ValidationError("empty training set")
    torch.manual_seed(rng.child("init").seed)
    enc = ConvEncoder(latent_channels, hidden)
    dec = ConvDecoder(latent_channels, hidden)
    params = list(enc.parameters()) + list(dec.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    n = images.shape[0]
    loop = rng.child("loop")
    for step in range(steps):
        idx = loop.randint(0, n, (batch_size,))
        x = images[idx]
        z = enc(x)
        recon = dec(z)
        loss = F.mse_loss(recon, x) + 1e-4 * (z**2).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"autoencoder diverged at step {step}", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        zs = []
        for i in range(0, min(n, 512), 64):
            zs.append(enc(images[i : i + 64]))
        z_all = torch.cat(zs)
        mean = z_all.mean(dim=(0, 2, 3))
        std = z_all.std(dim=(0, 2, 3)).clamp_min(1e-4)
    backend = LearnedBackend(enc, dec, mean, std)
    return backend.freeze()


def train_alt_decoder(
    backend: LearnedBackend,
    images: torch.Tensor,
    rng: RngStream,
    hidden: int = 48,
    steps: int = 800,
    batch_size: int = 32,
    lr: float = 2e-3,
) -> LearnedBackend:
    """A second decoder fitted to the frozen encoder from an independent init,
    standing in for a swapped VAE decoder of the same latent geometry."""
    torch.manual_seed(rng.child("init").seed)
    dec = ConvDecoder(backend.latent_channels, hidden)
    opt = torch.optim.Adam(dec.parameters(), lr=lr)
    n = images.shape[0]
    loop = rng.child("loop")
    for step in range(steps):
        idx = loop.randint(0, n, (batch_size,))
        x = images[idx]
        with torch.no_grad():
            z = backend.encode(x)
        recon = dec(z * backend.latent_std[:, None, None] + backend.latent_mean[:, None, None])
        loss = F.mse_loss(recon, x)
        if not torch.isfinite(loss):
            raise TrainingError(f"alt decoder diverged at step {step}", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
    alt = backend.with_decoder(dec, tag="alt")
    for p in alt.decoder.parameters():
        p.requires_grad_(False)
    return alt
