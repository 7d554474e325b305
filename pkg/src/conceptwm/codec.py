"""Latent watermark codec: OLW/FLW message encoders, a pixel-space message
decoder, the codec loss stack, and distortion-robust pretraining.

OLW overlays a residual computed from the message alone (removable by
subtraction); FLW fuses the message map with the input latent so the
residual depends on image content. Both start as the identity thanks to a
zero-initialized final layer. The decoder reads bits from pixels so that
distortions apply where attacks do.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import CodecSettings
from .errors import (
    ConfigError,
    DimensionError,
    PayloadError,
    TrainingError,
    ValidationError,
)
from .message import Message
from .rng import RngStream

# ---------------------------------------------------------------------------
# losses


def message_loss(target_bits: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Stabilized BCE between bits and pre-sigmoid logits, summed over bits
    and averaged over the batch."""
    if target_bits.shape[-1] != logits.shape[-1]:
        raise PayloadError(
            f"message length {target_bits.shape[-1]} vs logits {logits.shape[-1]}"
        )
    if target_bits.ndim == 1:
        target_bits = target_bits[None]
    if logits.ndim == 1:
        logits = logits[None]
    if target_bits.shape[0] == 1 and logits.shape[0] > 1:
        target_bits = target_bits.expand_as(logits)
    if target_bits.shape != logits.shape:
        raise PayloadError(f"bit shape {tuple(target_bits.shape)} vs logits {tuple(logits.shape)}")
    per_bit = F.binary_cross_entropy_with_logits(
        logits, target_bits.to(logits.dtype), reduction="none"
    )
    return per_bit.sum(dim=1).mean()


def message_loss_of(message: Message, logits: torch.Tensor) -> torch.Tensor:
    return message_loss(message.tensor(), logits)


_BLUR5 = None


def _gauss5(dtype):
    global _BLUR5
    if _BLUR5 is None or _BLUR5.dtype != dtype:
        x = torch.arange(5, dtype=torch.float64) - 2.0
        g = torch.exp(-(x**2) / 2.0)
        k = torch.outer(g, g)
        _BLUR5 = (k / k.sum()).to(dtype)
    return _BLUR5


def _blur(x: torch.Tensor) -> torch.Tensor:
    k = _gauss5(x.dtype)[None, None].expand(x.shape[1], 1, 5, 5)
    return F.conv2d(F.pad(x, (2, 2, 2, 2), mode="reflect"), k, groups=x.shape[1])


def _grad_mag(x: torch.Tensor) -> torch.Tensor:
    gx = x[..., 1:, 1:] - x[..., 1:, :-1]
    gy = x[..., 1:, 1:] - x[..., :-1, 1:]
    return torch.sqrt(gx**2 + gy**2 + 1e-6)


def perceptual_loss(original: torch.Tensor, watermarked: torch.Tensor) -> torch.Tensor:
    """Multi-scale proxy: MSE over a blurred/downsampled pyramid plus
    gradient-magnitude MSE; symmetric, zero iff the inputs are identical."""
    if original.shape != watermarked.shape:
        raise DimensionError(f"{tuple(original.shape)} vs {tuple(watermarked.shape)}")
    a, b = original, watermarked
    terms = [F.mse_loss(a, b), F.mse_loss(_grad_mag(a), _grad_mag(b))]
    for _ in range(2):
        a, b = F.avg_pool2d(_blur(a), 2), F.avg_pool2d(_blur(b), 2)
        terms.append(F.mse_loss(a, b))
        terms.append(F.mse_loss(_grad_mag(a), _grad_mag(b)))
    return torch.stack(terms).mean()


def ppd_loss(
    original: torch.Tensor, watermarked: torch.Tensor, top_fraction: float
) -> torch.Tensor:
    """Peak-pixel penalty: among the top fraction of pixels ranked by
    max-over-channels absolute residual, the mean per-channel squared residual."""
    if original.shape != watermarked.shape:
        raise DimensionError(f"{tuple(original.shape)} vs {tuple(watermarked.shape)}")
    if not (0.0 < top_fraction <= 1.0):
        raise ConfigError(f"top_fraction must be in (0,1], got {top_fraction}")
    r = watermarked - original
    b, c, h, w = r.shape
    k = min(h * w, math.ceil(top_fraction * h * w))
    score = r.abs().amax(dim=1).reshape(b, -1)  # (B, H*W)
    value = (r**2).mean(dim=1).reshape(b, -1)
    _, idx = torch.topk(score, k, dim=1)
    return value.gather(1, idx).mean()


def codec_total_loss(message_l, perceptual_l, ppd_l, config: CodecSettings):
    """Eq.-style weighted sum of the three codec terms."""
    return message_l + config.lambda_pips * perceptual_l + config.mu_ppd * ppd_l


# ---------------------------------------------------------------------------
# networks


class MessageEncoder(nn.Module):
    """Maps bits to a latent residual; OLW ignores the latent, FLW fuses it."""

    def __init__(self, cfg: CodecSettings, latent_shape: tuple[int, int, int]):
        super().__init__()
        self.variant = cfg.variant
        self.latent_shape = tuple(latent_shape)
        c, h, w = latent_shape
        m = cfg.msg_channels
        hid = cfg.hidden_channels
        self.project = nn.Linear(cfg.message_bits, m * h * w)
        in_ch = m if cfg.variant == "OLW" else m + c
        self.fuse = nn.Sequential(
            nn.Conv2d(in_ch, hid, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hid, hid, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hid, c, 3, padding=1),
        )
        final = self.fuse[-1]
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)

    def forward(self, latent: torch.Tensor, signs: torch.Tensor) -> torch.Tensor:
        c, h, w = self.latent_shape
        msg_map = self.project(signs).reshape(-1, self.project.out_features // (h * w), h, w)
        if msg_map.shape[0] == 1 and latent.shape[0] > 1:
            msg_map = msg_map.expand(latent.shape[0], -1, -1, -1)
        if self.variant == "OLW":
            return self.fuse(msg_map)
        return self.fuse(torch.cat([msg_map, latent], dim=1))


class PixelDecoder(nn.Module):
    """Reads message logits from a pixel image of any supported size."""

    def __init__(self, cfg: CodecSettings):
        super().__init__()
        hid = 2 * cfg.hidden_channels
        self.features = nn.Sequential(
            nn.Conv2d(3, cfg.hidden_channels, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(cfg.hidden_channels, hid, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(hid, hid, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(hid, hid, 3, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Linear(hid, cfg.message_bits)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h = self.features(images)
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return self.head(h)


@dataclass
class CodecCheckpoint:
    encoder: MessageEncoder
    decoder: PixelDecoder
    config: CodecSettings
    latent_shape: tuple[int, int, int]
    logit_bias: torch.Tensor  # (N,), subtracted from raw decoder outputs
    training_metadata: dict = field(default_factory=dict)

    @property
    def n_bits(self) -> int:
        return self.config.message_bits

    def _signs(self, message) -> torch.Tensor:
        if isinstance(message, Message):
            if len(message) != self.n_bits:
                raise PayloadError(f"message length {len(message)} != {self.n_bits}")
            return message.signs()[None]
        bits = message
        if bits.shape[-1] != self.n_bits:
            raise PayloadError(f"message length {bits.shape[-1]} != {self.n_bits}")
        if bits.ndim == 1:
            bits = bits[None]
        return bits.to(torch.float32) * 2.0 - 1.0

    def embed(self, latent: torch.Tensor, message) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (watermarked latent, sigma1 residual)."""
        if tuple(latent.shape[1:]) != self.latent_shape:
            raise DimensionError(
                f"latent shape {tuple(latent.shape[1:])} != codec shape {self.latent_shape}"
            )
        sigma1 = self.encoder(latent, self._signs(message).to(latent.dtype))
        return latent + sigma1, sigma1

    def extract_logits(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"expected (B,3,H,W) pixels, got {tuple(images.shape)}")
        if not torch.isfinite(images).all():
            raise ValidationError("non-finite pixels in decoder input")
        return self.decoder(images) - self.logit_bias.to(images.dtype)

    def extract_bits(self, images: torch.Tensor) -> torch.Tensor:
        """(B,N) uint8 hard decisions; logit > 0 decodes as 1."""
        return (self.extract_logits(images) > 0).to(torch.uint8)

    def parameters(self):
        return list(self.encoder.parameters()) + list(self.decoder.parameters())

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for module in (self.encoder, self.decoder):
            for name, p in sorted(module.state_dict().items()):
                h.update(name.encode())
                h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
        h.update(self.logit_bias.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()

    def freeze(self) -> "CodecCheckpoint":
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def new_codec(
    cfg: CodecSettings, latent_shape: tuple[int, int, int], rng: RngStream
) -> CodecCheckpoint:
    torch.manual_seed(rng.child("init").seed)
    return CodecCheckpoint(
        encoder=MessageEncoder(cfg, latent_shape),
        decoder=PixelDecoder(cfg),
        config=cfg,
        latent_shape=tuple(latent_shape),
        logit_bias=torch.zeros(cfg.message_bits),
    )


def embed_watermark(
    latent: torch.Tensor, message: Message, codec: CodecCheckpoint
) -> tuple[torch.Tensor, torch.Tensor]:
    return codec.embed(latent, message)


def extract_logits(image: torch.Tensor, codec: CodecCheckpoint) -> torch.Tensor:
    return codec.extract_logits(image)


# ---------------------------------------------------------------------------
# pretraining


def pretrain_codec(
    images: torch.Tensor,
    backend,
    distortion_pool: list,
    cfg: CodecSettings,
    rng: RngStream,
    apply_distortion=None,
) -> CodecCheckpoint:
    """Joint encoder/decoder training through the frozen latent backend.

    Each step embeds a fresh random message, decodes to pixels, pushes the
    result through one randomly drawn differentiable distortion, and descends
    on message + lambda*perceptual + mu*peak-pixel loss.
    """
    if images.shape[0] == 0:
        raise ValidationError("empty pretraining dataset")
    if apply_distortion is None:  # local import avoids a module cycle
        from .distortions import apply_distortion
    size = images.shape[-1]
    codec = new_codec(cfg, backend.latent_shape(size), rng)
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.learning_rate)
    n = images.shape[0]
    loop = rng.child("loop")
    curve = []
    for step in range(cfg.train_steps):
        idx = loop.randint(0, n, (cfg.batch_size,))
        x = images[idx]
        with torch.no_grad():
            z = backend.encode(x)
            x_ref = backend.decode(z).clamp(0.0, 1.0)
        bits = loop.randint(0, 2, (cfg.batch_size, cfg.message_bits))
        z_w, _ = codec.embed(z, bits)
        x_w = backend.decode(z_w).clamp(0.0, 1.0)
        if distortion_pool:
            spec = distortion_pool[loop.choice(len(distortion_pool))]
            x_in = apply_distortion(spec, x_w, loop.child(f"dist{step}"))
        else:
            x_in = x_w
        logits = codec.decoder(x_in)  # raw logits; bias is calibrated after training
        m_l = message_loss(bits, logits)
        p_l = perceptual_loss(x_ref, x_w)
        d_l = ppd_loss(x_ref, x_w, cfg.ppd_top_fraction)
        total = codec_total_loss(m_l, p_l, d_l, cfg)
        if not torch.isfinite(total):
            raise TrainingError(f"codec pretraining diverged at step {step}", step=step)
        opt.zero_grad()
        total.backward()
        opt.step()
        if step % 25 == 0 or step == cfg.train_steps - 1:
            with torch.no_grad():
                acc = ((logits > 0).to(torch.uint8) == bits.to(torch.uint8)).float().mean()
            curve.append(
                {"step": step, "total": float(total.detach()), "message": float(m_l.detach()),
                 "perceptual": float(p_l.detach()), "ppd": float(d_l.detach()), "bit_acc": float(acc)}
            )
    if cfg.calibrate_bias and cfg.train_steps > 0:
        with torch.no_grad():
            cal = images[: min(n, 256)]
            outs = []
            for i in range(0, cal.shape[0], 64):
                chunk = cal[i : i + 64]
                z = backend.encode(chunk)
                outs.append(codec.decoder(backend.decode(z).clamp(0.0, 1.0)))
            codec.logit_bias = torch.cat(outs).mean(dim=0)
    codec.training_metadata = {
        "seed": rng.seed,
        "steps": cfg.train_steps,
        "curve": curve,
        "final_losses": curve[-1] if curve else None,
        "distortion_layer": bool(distortion_pool),
    }
    return codec
