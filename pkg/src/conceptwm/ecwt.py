"""Efficient concept watermark training: alternate DreamBooth concept steps
with watermark steps that match the live model's prediction on perturbed
diffusion states to a frozen reference model's prediction on clean states.
Prompt adaptation feeds the watermark stage with the model's own generations
under a pool of concept prompts, recomputing the watermark residual for each.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .config import EcwtConfig
from .diffusion import (
    CONCEPT_SLOT,
    ModelCheckpoint,
    PromptSpec,
    dreambooth_loss,
    embed_prompt,
    eps_mse,
    instance_prompt,
    prior_prompt,
    q_sample,
    sample_latents,
)


def generate_images(
    model: ModelCheckpoint,
    backend,
    prompt: PromptSpec,
    n_images: int,
    rng: RngStream,
    steps: int,
    size: int,
    guidance_scale: float = 1.0,
    sampler: str = "ddim",
) -> torch.Tensor:
    """Internal sampler without the public {64,96} size gate (training-side use)."""
    cond = embed_prompt(prompt, model)
    z = sample_latents(
        model, cond, n_images, backend.latent_shape(size), rng,
        sampler=sampler, steps=steps, guidance_scale=guidance_scale,
    )
    return backend.decode(z).clamp(0.0, 1.0)
from .errors import ContractViolationError, TrainingError, ValidationError
from .iapi import AdversarialWatermark
from .rng import RngStream


def wm_loss_at(
    model: ModelCheckpoint,
    frozen: ModelCheckpoint,
    x0: torch.Tensor,
    phi_latent: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    cond: torch.Tensor,
) -> torch.Tensor:
    """Deterministic watermark-matching loss at fixed draws:
    || eps_theta(x_t + phi, t, c) - eps_frozen(x_t, t, c) ||^2."""
    x_t = q_sample(x0, t, eps, model.schedule)
    with torch.no_grad():
        target = frozen.predict(x_t, t, cond)
    return eps_mse(target, model.predict(x_t + phi_latent, t, cond))


def concept_step(
    model: ModelCheckpoint,
    opt: torch.optim.Optimizer,
    instance_latents: torch.Tensor,
    prior_latents: torch.Tensor | None,
    prompts: tuple[PromptSpec, PromptSpec],
    lambda_prior: float,
    rng: RngStream,
) -> float:
    """One optimizer step on the DreamBooth concept loss."""
    if instance_latents.shape[0] == 0:
        raise ValidationError("empty instance batch")
    loss = dreambooth_loss(model, instance_latents, prior_latents, prompts, lambda_prior, rng)
    if not torch.isfinite(loss):
        raise TrainingError("concept step diverged")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def watermark_step(
    model: ModelCheckpoint,
    opt: torch.optim.Optimizer,
    frozen: ModelCheckpoint,
    x0: torch.Tensor,
    phi_latent: torch.Tensor,
    cond: torch.Tensor,
    t_range: tuple[int, int],
    rng: RngStream,
) -> float:
    """One descent step on the watermark-matching loss with t in t_range."""
    b = x0.shape[0]
    t_lo, t_hi = t_range
    t = rng.randint(t_lo, max(t_hi, t_lo + 1), (b,))
    eps = rng.randn(*x0.shape)
    loss = wm_loss_at(model, frozen, x0, phi_latent, t, eps, cond)
    if not torch.isfinite(loss):
        raise TrainingError("watermark step diverged")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def phi_to_latent(backend, x: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """Project a pixel-space perturbation into latent space via the encoder
    difference (the diffusion state lives in latent space)."""
    with torch.no_grad():
        return backend.encode((x + phi).clamp(0.0, 1.0)) - backend.encode(x)


def adapt_prompts(
    model: ModelCheckpoint,
    backend,
    codec,
    message,
    pool_prompts: list[PromptSpec],
    n_per_prompt: int,
    sample_steps: int,
    rng: RngStream,
    size: int = 64,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Watermark-stage augmentation: sample images from the current model for
    each pool prompt, re-derive the watermark residual through the codec, and
    return (latents, phi_latents, conds). Empty tensors if n_per_prompt == 0."""
    for p in pool_prompts:
        if CONCEPT_SLOT not in p.template:
            raise ValidationError(f"pool prompt {p.template} lacks the concept slot")
    if n_per_prompt == 0 or not pool_prompts:
        empty = torch.zeros(0)
        return empty, empty, empty
    z_list, phi_list, cond_list = [], [], []
    for k, prompt in enumerate(pool_prompts):
        imgs = generate_images(
            model, backend, prompt, n_per_prompt, rng.child(f"gen{k}"),
            steps=sample_steps, size=size,
        )
        with torch.no_grad():
            z = backend.encode(imgs)
            z_w, _ = codec.embed(z, message)
            x_w = backend.decode(z_w).clamp(0.0, 1.0)
            sigma1 = x_w - imgs
            phi_lat = phi_to_latent(backend, imgs, sigma1)
        cond = embed_prompt(prompt, model)
        z_list.append(z)
        phi_list.append(phi_lat)
        cond_list.append(cond[None].expand(n_per_prompt, -1))
    return torch.cat(z_list), torch.cat(phi_list), torch.cat(cond_list)


@dataclass
class EcwtResult:
    model: ModelCheckpoint
    metrics: list[dict] = field(default_factory=list)
    frozen_hash_before: str = ""
    frozen_hash_after: str = ""


def train_concept_watermark(
    base: ModelCheckpoint,
    backend,
    codec,
    message,
    instance_images: torch.Tensor,
    instance_ids: list[str],
    perturbations: dict[str, AdversarialWatermark],
    concept_token: str,
    class_token: str,
    config: EcwtConfig,
    rng: RngStream,
    probe_every: int = 10,
    probe_images: int = 8,
) -> EcwtResult:
    """Alternating rounds of concept learning and watermark learning against a
    frozen snapshot of the base model."""
    missing = [i for i in instance_ids if i not in perturbations]
    if missing:
        raise ValidationError(f"missing perturbations for instance images: {missing}")

    size = int(instance_images.shape[-1])
    frozen = base.clone(version_tag=f"{base.version_tag}-frozen")
    for p in frozen.denoiser.parameters():
        p.requires_grad_(False)
    frozen_hash_before = frozen.param_hash()

    model = base.clone(version_tag=f"{base.version_tag}-concept")
    inst = instance_prompt(concept_token, class_token)
    prior = prior_prompt(class_token)
    prompts = (inst, prior)
    inst_cond = embed_prompt(inst, model)

    with torch.no_grad():
        inst_latents = backend.encode(instance_images)
        phi = torch.stack([perturbations[i].phi for i in instance_ids])
        phi_latents = phi_to_latent(backend, instance_images, phi)

    # prior-preservation images come from the frozen base model itself
    prior_latents = None
    if config.lambda_prior > 0:
        prior_imgs = generate_images(
            frozen, backend, prior, config.n_prior_images, rng.child("prior"),
            steps=config.sample_steps, size=size,
        )
        with torch.no_grad():
            prior_latents = backend.encode(prior_imgs)

    wm_z = inst_latents
    wm_phi = phi_latents
    wm_cond = inst_cond[None].expand(inst_latents.shape[0], -1)

    pool = [instance_prompt(concept_token, class_token, style) for style in config.prompt_pool]
    t_lo = int(config.wm_t_lo * model.schedule.T)
    t_hi = int(config.wm_t_hi * model.schedule.T)

    concept_opt = torch.optim.Adam(model.denoiser.parameters(), lr=config.concept_lr)
    wm_opt = torch.optim.Adam(model.denoiser.parameters(), lr=config.wm_lr)
    metrics = []
    loop = rng.child("loop")
    for rnd in range(config.rounds):
        r_rng = loop.child(f"round{rnd}")
        if (
            config.n_adapt_per_prompt > 0
            and config.wm_steps_per_round > 0
            and rnd > 0
            and rnd % config.adapt_every == 0
        ):
            az, aphi, acond = adapt_prompts(
                model, backend, codec, message, pool,
                config.n_adapt_per_prompt, config.sample_steps, r_rng.child("adapt"),
                size=size,
            )
            if az.numel():
                wm_z = torch.cat([inst_latents, az])
                wm_phi = torch.cat([phi_latents, aphi])
                wm_cond = torch.cat([inst_cond[None].expand(inst_latents.shape[0], -1), acond])

        c_losses = []
        for s in range(config.concept_steps_per_round):
            c_losses.append(
                concept_step(
                    model, concept_opt, inst_latents, prior_latents, prompts,
                    config.lambda_prior, r_rng.child(f"c{s}"),
                )
            )
        w_losses = []
        for s in range(config.wm_steps_per_round):
            s_rng = r_rng.child(f"w{s}")
            idx = s_rng.randint(0, wm_z.shape[0], (min(wm_z.shape[0], 8),))
            w_losses.append(
                watermark_step(
                    model, wm_opt, frozen, wm_z[idx], wm_phi[idx], wm_cond[idx],
                    (t_lo, t_hi), s_rng,
                )
            )
        record = {
            "round": rnd,
            "concept_loss": sum(c_losses) / len(c_losses) if c_losses else None,
            "wm_loss": sum(w_losses) / len(w_losses) if w_losses else None,
        }
        if probe_every and (rnd % probe_every == probe_every - 1 or rnd == config.rounds - 1):
            with torch.no_grad():
                probe = generate_images(
                    model, backend, inst, probe_images, rng.child(f"probe{rnd}"),
                    steps=config.sample_steps, size=size,
                )
                bits = codec.extract_bits(probe)
                ref = torch.tensor(message.bits, dtype=torch.uint8)
                record["probe_bit_acc"] = float((bits == ref).float().mean())
        metrics.append(record)

    frozen_hash_after = frozen.param_hash()
    if frozen_hash_after != frozen_hash_before:
        raise ContractViolationError("frozen reference model was mutated during ECWT")
    return EcwtResult(
        model=model,
        metrics=metrics,
        frozen_hash_before=frozen_hash_before,
        frozen_hash_after=frozen_hash_after,
    )
