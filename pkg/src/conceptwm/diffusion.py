"""Toy latent diffusion: schedule, prompt embeddings, conditional denoiser,
losses and samplers (DDIM / ancestral / Heun) with classifier-free guidance.

The denoiser is a small U-shaped conv net conditioned through feature-wise
affine modulation; prompts are bags of tokens embedded by mean pooling over
a fixed table, which keeps the concept-token / class-token distinction
without a text encoder.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, TrainingError, ValidationError, VocabularyError
from .rng import RngStream

NULL_TOKEN = "<null>"
CONCEPT_SLOT = "<concept>"
CLASS_SLOT = "[class]"


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray  # float64, shape (T,)
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.T,):
            raise ConfigError(f"need {self.T} betas, got shape {betas.shape}")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("betas must lie in (0,1)")
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        return cls(T=T, betas=np.linspace(beta_start, beta_end, T, dtype=np.float64))

    def ab(self, t: int) -> float:
        if not (0 <= t < self.T):
            raise ValidationError(f"timestep {t} outside [0, {self.T})")
        return float(self.alpha_bars[t])


def q_sample_ab(x0: torch.Tensor, alpha_bar, eps: torch.Tensor) -> torch.Tensor:
    """Forward noising at a given alpha_bar (scalar or per-example tensor)."""
    if isinstance(alpha_bar, torch.Tensor):
        ab = alpha_bar.to(x0.dtype).view(-1, *([1] * (x0.ndim - 1)))
    else:
        ab = torch.tensor(float(alpha_bar), dtype=x0.dtype)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps, with t an int or a (B,) tensor."""
    if x0.shape != eps.shape:
        raise ValidationError(f"x0 shape {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    if isinstance(t, torch.Tensor):
        tl = t.long()
        if torch.any(tl < 0) or torch.any(tl >= schedule.T):
            raise ValidationError(f"timesteps outside [0, {schedule.T})")
        ab = torch.from_numpy(schedule.alpha_bars).to(x0.dtype)[tl]
        return q_sample_ab(x0, ab, eps)
    return q_sample_ab(x0, schedule.ab(int(t)), eps)


# ---------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class PromptSpec:
    """A token template with <concept> / [class] slots."""

    template: tuple[str, ...]
    concept_token: str | None = None
    class_token: str | None = None
    is_prior: bool = False

    def __post_init__(self):
        if self.is_prior and CONCEPT_SLOT in self.template:
            raise ValidationError("prior prompts must not contain the concept slot")
        if CONCEPT_SLOT in self.template and self.concept_token is None:
            raise ValidationError("template has a concept slot but no concept token")
        if CLASS_SLOT in self.template and self.class_token is None:
            raise ValidationError("template has a class slot but no class token")

    def tokens(self) -> tuple[str, ...]:
        out = []
        for tok in self.template:
            if tok == CONCEPT_SLOT:
                out.append(self.concept_token)
            elif tok == CLASS_SLOT:
                out.append(self.class_token)
            else:
                out.append(tok)
        return tuple(out)


def instance_prompt(concept_token: str, class_token: str, style: str = "photo") -> PromptSpec:
    return PromptSpec(
        template=("a", style, "of", CONCEPT_SLOT, CLASS_SLOT),
        concept_token=concept_token,
        class_token=class_token,
    )


def prior_prompt(class_token: str, style: str = "photo") -> PromptSpec:
    return PromptSpec(
        template=("a", style, "of", CLASS_SLOT),
        class_token=class_token,
        is_prior=True,
    )


def null_prompt() -> PromptSpec:
    return PromptSpec(template=(NULL_TOKEN,))


def build_embedding_table(
    tokens: list[str], cond_dim: int, rng: RngStream
) -> dict[str, torch.Tensor]:
    """Fixed random token embeddings (unit-scale), null token included."""
    table = {}
    for tok in [NULL_TOKEN] + sorted(set(tokens) - {NULL_TOKEN}):
        table[tok] = rng.child(f"tok/{tok}").randn(cond_dim)
    return table


def embed_prompt(prompt: PromptSpec, model: "ModelCheckpoint") -> torch.Tensor:
    """Mean of the filled template's token embeddings."""
    vecs = []
    for tok in prompt.tokens():
        if tok not in model.embedding_table:
            raise VocabularyError(f"token {tok!r} not in embedding table")
        vecs.append(model.embedding_table[tok])
    return torch.stack(vecs).mean(dim=0)


# ---------------------------------------------------------------------------
# denoiser


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class FiLMBlock(nn.Module):
    """Residual conv block with scale/shift modulation from the fused embedding."""

    def __init__(self, channels: int, emb_dim: int):
        super().__init__()
        groups = 8 if channels % 8 == 0 else 4
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * channels)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(emb).chunk(2, dim=1)
        h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class ToyDenoiser(nn.Module):
    """Small U-shaped conditional eps-predictor on latents."""

    def __init__(self, latent_channels: int = 4, channels: int = 48, cond_dim: int = 24):
        super().__init__()
        self.latent_channels = latent_channels
        self.channels = channels
        self.cond_dim = cond_dim
        emb = 2 * channels
        self.emb_dim = emb
        self.time_mlp = nn.Sequential(nn.Linear(32, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.cond_mlp = nn.Linear(cond_dim, emb)
        self.conv_in = nn.Conv2d(latent_channels, channels, 3, padding=1)
        self.block_in = FiLMBlock(channels, emb)
        self.down = nn.Conv2d(channels, 2 * channels, 3, stride=2, padding=1)
        self.block_mid1 = FiLMBlock(2 * channels, emb)
        self.block_mid2 = FiLMBlock(2 * channels, emb)
        self.up = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.merge = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.block_out = FiLMBlock(channels, emb)
        self.conv_out = nn.Conv2d(channels, latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x, t, cond):
        if cond.ndim == 1:
            cond = cond[None].expand(x.shape[0], -1)
        emb = self.time_mlp(sinusoidal_embedding(t.to(x.dtype), 32)) + self.cond_mlp(cond)
        h0 = self.conv_in(x)
        h0 = self.block_in(h0, emb)
        h = self.down(h0)
        h = self.block_mid1(h, emb)
        h = self.block_mid2(h, emb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up(h)
        h = self.merge(torch.cat([h, h0], dim=1))
        h = self.block_out(h, emb)
        return self.conv_out(h)


@dataclass
class ModelCheckpoint:
    """Denoiser weights plus the token table, schedule and a version tag."""

    denoiser: ToyDenoiser
    embedding_table: dict[str, torch.Tensor]
    schedule: NoiseSchedule
    version_tag: str = "v-a"

    def __post_init__(self):
        if NULL_TOKEN not in self.embedding_table:
            raise ValidationError("embedding table must contain the null token")

    def predict(self, x_t, t, cond):
        return self.denoiser(x_t, t, cond)

    def clone(self, version_tag: str | None = None) -> "ModelCheckpoint":
        return ModelCheckpoint(
            denoiser=copy.deepcopy(self.denoiser),
            embedding_table={k: v.clone() for k, v in self.embedding_table.items()},
            schedule=self.schedule,
            version_tag=version_tag or self.version_tag,
        )

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.denoiser.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()

    def null_cond(self) -> torch.Tensor:
        return self.embedding_table[NULL_TOKEN]


# ---------------------------------------------------------------------------
# losses


def eps_mse(eps: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Squared error summed over latent dims, averaged over the batch."""
    return ((eps - pred) ** 2).flatten(1).sum(dim=1).mean()


def cond_loss_at(model, x0, t, eps, cond) -> torch.Tensor:
    """Deterministic Eq.-style denoising loss at fixed draws (gradcheck target)."""
    x_t = q_sample(x0, t, eps, model.schedule)
    return eps_mse(eps, model.predict(x_t, t, cond))


def cond_loss(model, x0: torch.Tensor, prompt: PromptSpec, rng: RngStream) -> torch.Tensor:
    """Denoising loss with t ~ U[0,T) and eps ~ N(0,I) sampled from the stream."""
    b = x0.shape[0]
    t = rng.randint(0, model.schedule.T, (b,))
    eps = rng.randn(*x0.shape, dtype=x0.dtype)
    cond = embed_prompt(prompt, model).to(x0.dtype)
    return cond_loss_at(model, x0, t, eps, cond)


def dreambooth_loss(
    model,
    instance_x0: torch.Tensor,
    prior_x0: torch.Tensor | None,
    prompts: tuple[PromptSpec, PromptSpec],
    lambda_prior: float,
    rng: RngStream,
) -> torch.Tensor:
    """Instance denoising term plus lambda times the prior-preservation term."""
    if lambda_prior < 0:
        raise ValidationError("lambda_prior must be >= 0")
    inst_prompt, pr_prompt = prompts
    loss = cond_loss(model, instance_x0, inst_prompt, rng.child("instance"))
    if lambda_prior > 0:
        if prior_x0 is None:
            raise ValidationError("lambda_prior > 0 requires a prior batch")
        loss = loss + lambda_prior * cond_loss(model, prior_x0, pr_prompt, rng.child("prior"))
    return loss


# ---------------------------------------------------------------------------
# sampling


def _timestep_sequence(T: int, steps: int) -> list[int]:
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    ts = np.unique(np.round(np.linspace(T - 1, 0, steps)).astype(int))[::-1]
    return [int(t) for t in ts]


def _guided_eps(model, x, t, cond, uncond, scale: float):
    eps_c = model.predict(x, t, cond)
    if scale == 1.0:
        return eps_c
    eps_u = model.predict(x, t, uncond)
    return eps_u + scale * (eps_c - eps_u)


def _ddim_update(x, eps_hat, ab_t: float, ab_prev: float, sigma: float = 0.0, noise=None):
    x0 = (x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    dir_coeff = math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
    out = math.sqrt(ab_prev) * x0 + dir_coeff * eps_hat
    if sigma > 0.0 and noise is not None:
        out = out + sigma * noise
    return out


@torch.no_grad()
def sample_latents(
    model,
    cond: torch.Tensor,
    n_images: int,
    latent_shape: tuple[int, int, int],
    rng: RngStream,
    sampler: str = "ddim",
    steps: int = 50,
    guidance_scale: float = 7.5,
    x_init: torch.Tensor | None = None,
    t_start: int | None = None,
) -> torch.Tensor:
    """Iterative denoising from (optionally partial) noise to latents."""
    if sampler not in ("ddim", "ancestral", "heun"):
        raise ConfigError(f"unknown sampler {sampler!r}")
    sched = model.schedule
    ab = sched.alpha_bars
    x = rng.randn(n_images, *latent_shape) if x_init is None else x_init.clone()
    uncond = model.null_cond()
    if cond.ndim == 1:
        cond = cond[None].expand(n_images, -1)
    ts = _timestep_sequence(sched.T, steps)
    if t_start is not None:
        ts = [t for t in ts if t <= t_start]
        if not ts or ts[0] != t_start:
            ts = [t_start] + ts
    for i, t in enumerate(ts):
        ab_t = float(ab[t])
        ab_prev = float(ab[ts[i + 1]]) if i + 1 < len(ts) else 1.0
        tb = torch.full((x.shape[0],), t, dtype=torch.long)
        eps1 = _guided_eps(model, x, tb, cond, uncond, guidance_scale)
        if sampler == "ancestral" and i + 1 < len(ts):
            sigma = math.sqrt((1 - ab_prev) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_prev)
            noise = rng.randn(*x.shape)
            x = _ddim_update(x, eps1, ab_t, ab_prev, sigma=sigma, noise=noise)
        elif sampler == "heun" and i + 1 < len(ts):
            x_pred = _ddim_update(x, eps1, ab_t, ab_prev)
            tb2 = torch.full((x.shape[0],), ts[i + 1], dtype=torch.long)
            eps2 = _guided_eps(model, x_pred, tb2, cond, uncond, guidance_scale)
            x = _ddim_update(x, 0.5 * (eps1 + eps2), ab_t, ab_prev)
        else:
            x = _ddim_update(x, eps1, ab_t, ab_prev)
    return x


def sample(
    model,
    backend,
    prompt: PromptSpec,
    n_images: int,
    rng: RngStream,
    sampler: str = "ddim",
    steps: int = 50,
    guidance_scale: float = 7.5,
    size: int = 64,
) -> torch.Tensor:
    """Sample pixel images: denoise latents under guidance, then decode."""
    if size not in (64, 96):
        raise ConfigError(f"generation size {size} unsupported (use 64 or 96)")
    latent_shape = backend.latent_shape(size)
    cond = embed_prompt(prompt, model)
    z = sample_latents(
        model, cond, n_images, latent_shape, rng,
        sampler=sampler, steps=steps, guidance_scale=guidance_scale,
    )
    return backend.decode(z).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# base training


def train_denoiser(
    latents: torch.Tensor,
    conds: torch.Tensor,
    schedule: NoiseSchedule,
    embedding_table: dict[str, torch.Tensor],
    rng: RngStream,
    steps: int,
    batch_size: int = 48,
    lr: float = 2e-3,
    guidance_dropout: float = 0.1,
    channels: int = 48,
    version_tag: str = "v-a",
) -> tuple[ModelCheckpoint, list[float]]:
    """Minimize the conditional denoising loss over a latent corpus."""
    if latents.shape[0] == 0:
        raise ValidationError("empty training set")
    cond_dim = conds.shape[1]
    torch.manual_seed(rng.child("init").seed)
    net = ToyDenoiser(latent_channels=latents.shape[1], channels=channels, cond_dim=cond_dim)
    model = ModelCheckpoint(net, embedding_table, schedule, version_tag=version_tag)
    null_vec = model.null_cond()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    n = latents.shape[0]
    curve = []
    loop = rng.child("loop")
    for step in range(steps):
        idx = loop.randint(0, n, (batch_size,))
        x0 = latents[idx]
        cond = conds[idx].clone()
        drop = loop.rand(batch_size) < guidance_dropout
        cond[drop] = null_vec
        t = loop.randint(0, schedule.T, (batch_size,))
        eps = loop.randn(*x0.shape)
        loss = cond_loss_at(model, x0, t, eps, cond)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 25 == 0 or step == steps - 1:
            curve.append(float(loss.item()))
    return model, curve
