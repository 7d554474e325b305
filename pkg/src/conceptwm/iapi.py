"""Imperceptible adversarial perturbation injection.

A surrogate model is fine-tuned with the concept loss on clean reference
images (disjoint from the concept-learning pool), then projected gradient
ascent maximizes the surrogate's denoising loss around the watermarked
image. The result is an adversarial watermark phi = sigma1 + sigma2 with
the adversarial part confined to an l-infinity ball of radius eta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .config import IapiConfig
from .diffusion import (
    ModelCheckpoint,
    PromptSpec,
    cond_loss_at,
    dreambooth_loss,
    embed_prompt,
)
from .errors import AttackError, ProtocolError, ValidationError
from .message import Message
from .rng import RngStream


@dataclass
class AdversarialWatermark:
    """Per-image perturbation triple; phi = sigma1 + sigma2 elementwise."""

    sigma1: torch.Tensor  # (3,H,W) watermark residual in pixel space
    sigma2: torch.Tensor  # (3,H,W) adversarial residual, |.|_inf <= eta
    source_image_id: str
    eta: float
    audit: dict = field(default_factory=dict)

    @property
    def phi(self) -> torch.Tensor:
        return self.sigma1 + self.sigma2


@dataclass
class PgdResult:
    sigma2: torch.Tensor
    probe_losses: list[float]  # frozen-probe loss after init and after each step

    def monotone_fraction(self) -> float:
        ups = sum(
            1 for a, b in zip(self.probe_losses, self.probe_losses[1:]) if b >= a
        )
        return ups / max(len(self.probe_losses) - 1, 1)


def surrogate_finetune(
    base: ModelCheckpoint,
    clean_refs: torch.Tensor,
    ref_ids: list[str],
    instance_ids: list[str],
    backend,
    prompts: tuple[PromptSpec, PromptSpec],
    prior_latents: torch.Tensor | None,
    config: IapiConfig,
    rng: RngStream,
) -> ModelCheckpoint:
    """Concept-loss descent on the clean reference pool X_B, starting from the
    base model. The references must be disjoint from the concept pool X_A."""
    overlap = set(ref_ids) & set(instance_ids)
    if overlap:
        raise ProtocolError(
            f"reference pool overlaps concept-learning pool: {sorted(overlap)}"
        )
    if clean_refs.shape[0] == 0:
        raise ValidationError("empty reference pool")
    surrogate = base.clone(version_tag=f"{base.version_tag}-surrogate")
    opt = torch.optim.Adam(surrogate.denoiser.parameters(), lr=config.surrogate_lr)
    with torch.no_grad():
        ref_latents = backend.encode(clean_refs)
    loop = rng.child("loop")
    for step in range(config.surrogate_steps):
        loss = dreambooth_loss(
            surrogate, ref_latents, prior_latents, prompts,
            1.0 if prior_latents is not None else 0.0, loop.child(f"s{step}"),
        )
        if not torch.isfinite(loss):
            raise AttackError(f"surrogate fine-tune diverged at step {step}", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return surrogate


def _project(sigma2: torch.Tensor, anchor: torch.Tensor, eta: float) -> torch.Tensor:
    """Exact box projection: the l-inf ball intersected with valid pixel range."""
    eta_t = torch.tensor(eta, dtype=sigma2.dtype)
    lo = torch.maximum(-eta_t, -anchor)
    hi = torch.minimum(eta_t, 1.0 - anchor)
    return torch.clamp(sigma2, min=lo, max=hi)


def pgd_attack(
    surrogate: ModelCheckpoint,
    x_clean: torch.Tensor,
    sigma1: torch.Tensor,
    backend,
    prompt: PromptSpec,
    config: IapiConfig,
    rng: RngStream,
    n_probe: int = 8,
    fixed_draws: bool = False,
) -> PgdResult:
    """Sign-gradient ascent on the surrogate's denoising loss around x + sigma1.

    By default fresh (t, eps) draws drive each ascent step and a frozen probe
    set only measures progress. With ``fixed_draws=True`` the steps themselves
    ascend the frozen-probe objective, which decouples the monotonicity audit
    from step stochasticity.
    """
    anchor = (x_clean + sigma1).clamp(0.0, 1.0)
    sigma2 = torch.zeros_like(anchor)
    cond = embed_prompt(prompt, surrogate)
    sched = surrogate.schedule
    probe_rng = rng.child("probe")
    b = anchor.shape[0]

    def probe_latent_shape():
        with torch.no_grad():
            return backend.encode(anchor).shape

    z_shape = probe_latent_shape()
    probe_t = [probe_rng.randint(0, sched.T, (b,)) for _ in range(n_probe)]
    probe_eps = [probe_rng.randn(*z_shape) for _ in range(n_probe)]

    def surrogate_loss(imgs, t, eps):
        z = backend.encode(imgs)
        return cond_loss_at(surrogate, z, t, eps, cond)

    @torch.no_grad()
    def probe_loss(imgs) -> float:
        return float(
            sum(surrogate_loss(imgs, t, e) for t, e in zip(probe_t, probe_eps)) / n_probe
        )

    probe_losses = [probe_loss(anchor + sigma2)]
    step_rng = rng.child("steps")
    for step in range(config.pgd_steps):
        sigma2 = sigma2.detach().requires_grad_(True)
        imgs = (anchor + sigma2).clamp(0.0, 1.0)
        if fixed_draws:
            loss = sum(surrogate_loss(imgs, t, e) for t, e in zip(probe_t, probe_eps)) / n_probe
        else:
            t = step_rng.randint(0, sched.T, (b,))
            eps = step_rng.randn(*z_shape)
            loss = surrogate_loss(imgs, t, eps)
        (grad,) = torch.autograd.grad(loss, sigma2)
        if not torch.isfinite(grad).all():
            raise AttackError(f"non-finite PGD gradient at step {step}", step=step)
        with torch.no_grad():
            sigma2 = _project(sigma2 + config.alpha * grad.sign(), anchor, config.eta)
        probe_losses.append(probe_loss(anchor + sigma2))
    return PgdResult(sigma2=sigma2.detach(), probe_losses=probe_losses)


def build_adversarial_watermark(
    codec,
    backend,
    surrogate: ModelCheckpoint,
    x_clean: torch.Tensor,
    image_id: str,
    message: Message,
    prompt: PromptSpec,
    config: IapiConfig,
    rng: RngStream,
) -> AdversarialWatermark:
    """sigma1 from the codec through the latent backend, sigma2 from PGD,
    plus a decodability audit comparing x+phi against x+sigma1."""
    if x_clean.ndim == 3:
        x_clean = x_clean[None]
    with torch.no_grad():
        z = backend.encode(x_clean)
        z_w, _ = codec.embed(z, message)
        x_w = backend.decode(z_w).clamp(0.0, 1.0)
        sigma1 = x_w - x_clean
    result = pgd_attack(surrogate, x_clean, sigma1, backend, prompt, config, rng)
    sigma2 = result.sigma2
    with torch.no_grad():
        ref_bits = torch.tensor(message.bits, dtype=torch.uint8)
        acc_wm = float(
            (codec.extract_bits((x_clean + sigma1).clamp(0, 1)) == ref_bits).float().mean()
        )
        acc_phi = float(
            (codec.extract_bits((x_clean + sigma1 + sigma2).clamp(0, 1)) == ref_bits)
            .float()
            .mean()
        )
    audit = {
        "bit_acc_watermark_only": acc_wm,
        "bit_acc_with_adversarial": acc_phi,
        "decodability_drop": acc_wm - acc_phi,
        "decodability_warning": bool(acc_phi < 0.9 * acc_wm),
        "pgd_monotone_fraction": result.monotone_fraction(),
        "probe_loss_first": result.probe_losses[0],
        "probe_loss_last": result.probe_losses[-1],
    }
    return AdversarialWatermark(
        sigma1=sigma1[0],
        sigma2=sigma2[0],
        source_image_id=image_id,
        eta=config.eta,
        audit=audit,
    )
