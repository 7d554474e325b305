"""Evaluation harness: decode accuracy sweeps over the attack suite, the
inference-setting ablation grid, and the paired fine-tune protection
experiment (protected vs clean training images, everything else shared).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .codec import CodecCheckpoint
from .detection import detection_threshold
from .diffusion import (
    ModelCheckpoint,
    PromptSpec,
    cond_loss_at,
    dreambooth_loss,
    embed_prompt,
    sample_latents,
)
from .distortions import DistortionSpec, apply_distortion
from .ecwt import generate_images
from .errors import TrainingError, ValidationError
from .message import Message
from .metrics import psnr, ssim
from .rng import RngStream


@dataclass
class SweepRow:
    label: str
    bit_accuracy: float
    tpr: float
    n_images: int

    def as_record(self) -> dict:
        return {
            "label": self.label,
            "bit_accuracy": self.bit_accuracy,
            "tpr": self.tpr,
            "n_images": self.n_images,
        }


@dataclass
class SweepReport:
    rows: list[SweepRow]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        labels = [r.label for r in self.rows]
        if len(set(labels)) != len(labels):
            raise ValidationError(f"duplicate sweep labels: {labels}")
        if any(r.n_images <= 0 for r in self.rows):
            raise ValidationError("sweep rows must cover at least one image")

    def row(self, label: str) -> SweepRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def decode_stats(
    codec: CodecCheckpoint, images: torch.Tensor, message: Message, fpr: float
) -> tuple[float, float]:
    """(mean per-image bit accuracy, TPR at the exact binomial threshold)."""
    with torch.no_grad():
        bits = codec.extract_bits(images)
    ref = torch.tensor(message.bits, dtype=torch.uint8)
    matches = (bits == ref).sum(dim=1)
    acc = float(matches.float().mean()) / codec.n_bits
    tau = detection_threshold(codec.n_bits, fpr)
    tpr = float((matches >= tau).float().mean())
    return acc, tpr


def robustness_sweep(
    model: ModelCheckpoint,
    backend,
    codec: CodecCheckpoint,
    message: Message,
    prompt: PromptSpec,
    suite: list[DistortionSpec],
    n_images: int,
    fpr: float,
    rng: RngStream,
    steps: int = 50,
    guidance_scale: float = 1.5,
    size: int = 64,
) -> SweepReport:
    """Clean row, one row per attack (column labels follow the attack table),
    and an average row over the attacks."""
    images = generate_images(
        model, backend, prompt, n_images, rng.child("gen"),
        steps=steps, size=size, guidance_scale=guidance_scale,
    )
    rows = []
    clean_acc, clean_tpr = decode_stats(codec, images, message, fpr)
    rows.append(SweepRow("Clean", clean_acc, clean_tpr, n_images))
    attack_accs, attack_tprs = [], []
    for spec in suite:
        with torch.no_grad():
            distorted = apply_distortion(spec, images, rng.child(f"attack/{spec.label}"))
        acc, tpr = decode_stats(codec, distorted, message, fpr)
        rows.append(SweepRow(spec.label, acc, tpr, n_images))
        attack_accs.append(acc)
        attack_tprs.append(tpr)
    if attack_accs:
        rows.append(
            SweepRow(
                "Average",
                sum(attack_accs) / len(attack_accs),
                sum(attack_tprs) / len(attack_tprs),
                n_images,
            )
        )
    return SweepReport(
        rows=rows,
        metadata={
            "seed": rng.seed,
            "fpr": fpr,
            "n_images": n_images,
            "paper_reference_average_bit_accuracy": 91.34,  # full-scale context only
        },
    )


def inference_ablation_sweep(
    model: ModelCheckpoint,
    backend_native,
    backend_mismatched,
    codec: CodecCheckpoint,
    message: Message,
    prompt: PromptSpec,
    n_images: int,
    fpr: float,
    rng: RngStream,
    steps_axis=(25, 50, 100),
    sampler_axis=("ddim", "ancestral", "heun"),
    guidance_axis=(5.0, 7.5, 10.0),
    size_axis=(64, 96),
    default_steps: int = 50,
    default_sampler: str = "ddim",
    default_guidance: float = 1.5,
    default_size: int = 64,
) -> SweepReport:
    """One row per setting; all other settings stay at their defaults."""
    cond = embed_prompt(prompt, model)

    def run(label, sampler, steps, guidance, size, backend, stream, x_init=None):
        z = sample_latents(
            model, cond, n_images, backend.latent_shape(size), stream,
            sampler=sampler, steps=steps, guidance_scale=guidance, x_init=x_init,
        )
        images = backend.decode(z).clamp(0.0, 1.0)
        acc, tpr = decode_stats(codec, images, message, fpr)
        return SweepRow(label, acc, tpr, n_images), z

    rows = []
    for steps in steps_axis:
        row, _ = run(f"Steps={steps}", default_sampler, steps, default_guidance,
                     default_size, backend_native, rng.child(f"steps/{steps}"))
        rows.append(row)
    for sampler in sampler_axis:
        row, _ = run(f"Sampler={sampler}", sampler, default_steps, default_guidance,
                     default_size, backend_native, rng.child(f"sampler/{sampler}"))
        rows.append(row)
    for guidance in guidance_axis:
        row, _ = run(f"Guidance={guidance:g}", default_sampler, default_steps, guidance,
                     default_size, backend_native, rng.child(f"guidance/{guidance:g}"))
        rows.append(row)
    for size in size_axis:
        row, _ = run(f"Size={size}", default_sampler, default_steps, default_guidance,
                     size, backend_native, rng.child(f"size/{size}"))
        rows.append(row)
    # decoder swap: same latents, different decoder (the VAE-replacement analog)
    swap_stream = rng.child("swap")
    row_native, z = run("Backend=native", default_sampler, default_steps, default_guidance,
                        default_size, backend_native, swap_stream)
    rows.append(row_native)
    with torch.no_grad():
        mismatched_imgs = backend_mismatched.decode(z).clamp(0.0, 1.0)
    acc, tpr = decode_stats(codec, mismatched_imgs, message, fpr)
    rows.append(SweepRow("Backend=mismatched", acc, tpr, n_images))
    return SweepReport(rows=rows, metadata={"seed": rng.seed, "fpr": fpr, "n_images": n_images})


# ---------------------------------------------------------------------------
# protection evaluation


def dreambooth_finetune(
    base: ModelCheckpoint,
    backend,
    images: torch.Tensor,
    prompts: tuple[PromptSpec, PromptSpec],
    prior_latents: torch.Tensor | None,
    lambda_prior: float,
    steps: int,
    lr: float,
    rng: RngStream,
) -> ModelCheckpoint:
    """Plain concept fine-tune used as the attacker model; noise draws come
    from the caller's stream so paired runs share every random choice."""
    model = base.clone(version_tag=f"{base.version_tag}-ft")
    opt = torch.optim.Adam(model.denoiser.parameters(), lr=lr)
    with torch.no_grad():
        latents = backend.encode(images)
    for step in range(steps):
        loss = dreambooth_loss(
            model, latents, prior_latents, prompts, lambda_prior, rng.child(f"s{step}")
        )
        if not torch.isfinite(loss):
            raise TrainingError(f"attacker fine-tune diverged at step {step}", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model


def heldout_denoising_loss(
    model: ModelCheckpoint, latents: torch.Tensor, cond: torch.Tensor, probes
) -> float:
    """Mean conditional denoising loss over a fixed probe set of (t, eps)."""
    with torch.no_grad():
        vals = [float(cond_loss_at(model, latents, t, eps, cond)) for t, eps in probes]
    return sum(vals) / len(vals)


def nearest_reference_quality(
    generations: torch.Tensor, refs: torch.Tensor
) -> tuple[float, float]:
    """Mean PSNR/SSIM of each generation against its best-matching reference."""
    psnrs, ssims = [], []
    for g in generations:
        best_p, best_ref = -1.0, None
        for r in refs:
            p = psnr(g, r)
            if p > best_p:
                best_p, best_ref = p, r
        psnrs.append(best_p)
        ssims.append(ssim(g, best_ref))
    return sum(psnrs) / len(psnrs), sum(ssims) / len(ssims)


def protection_eval(
    protected_outputs: torch.Tensor,
    clean_outputs: torch.Tensor,
    attacker_base: ModelCheckpoint,
    backend,
    prompts: tuple[PromptSpec, PromptSpec],
    holdout_refs: torch.Tensor,
    rng: RngStream,
    ft_steps: int = 250,
    ft_lr: float = 1e-3,
    lambda_prior: float = 1.0,
    n_generations: int = 24,
    probe_draws: int = 64,
    sample_steps: int = 30,
) -> dict:
    """Paired fine-tune attack: the two runs share seeds and noise draws, so
    the only varying factor is the training images."""
    if protected_outputs.shape != clean_outputs.shape:
        raise ValidationError("protected and clean sets must have identical shapes")
    inst_prompt, pr_prompt = prompts
    size = int(protected_outputs.shape[-1])

    prior_latents = None
    if lambda_prior > 0:
        prior_imgs = generate_images(
            attacker_base, backend, pr_prompt, min(16, 2 * protected_outputs.shape[0]),
            rng.child("prior"), steps=sample_steps, size=size,
        )
        with torch.no_grad():
            prior_latents = backend.encode(prior_imgs)

    def attack(images):
        return dreambooth_finetune(
            attacker_base, backend, images, prompts, prior_latents, lambda_prior,
            ft_steps, ft_lr, rng.child("ft"),  # shared stream: paired by construction
        )

    model_protected = attack(protected_outputs)
    model_clean = attack(clean_outputs)

    with torch.no_grad():
        holdout_latents = backend.encode(holdout_refs)
    cond = embed_prompt(inst_prompt, attacker_base)
    probe_rng = rng.child("probes")
    probes = []
    for _ in range(probe_draws):
        t = probe_rng.randint(0, attacker_base.schedule.T, (holdout_latents.shape[0],))
        eps = probe_rng.randn(*holdout_latents.shape)
        probes.append((t, eps))
    loss_protected = heldout_denoising_loss(model_protected, holdout_latents, cond, probes)
    loss_clean = heldout_denoising_loss(model_clean, holdout_latents, cond, probes)

    gen_protected = generate_images(
        model_protected, backend, inst_prompt, n_generations, rng.child("gen"),
        steps=sample_steps, size=size,
    )
    gen_clean = generate_images(
        model_clean, backend, inst_prompt, n_generations, rng.child("gen"),
        steps=sample_steps, size=size,
    )
    psnr_protected, ssim_protected = nearest_reference_quality(gen_protected, holdout_refs)
    psnr_clean, ssim_clean = nearest_reference_quality(gen_clean, holdout_refs)

    return {
        "heldout_loss_protected": loss_protected,
        "heldout_loss_clean": loss_clean,
        "loss_ratio": loss_protected / loss_clean,
        "psnr_protected": psnr_protected,
        "psnr_clean": psnr_clean,
        "psnr_drop_db": psnr_clean - psnr_protected,
        "ssim_protected": ssim_protected,
        "ssim_clean": ssim_clean,
        "n_generations": n_generations,
        "ft_steps": ft_steps,
    }
