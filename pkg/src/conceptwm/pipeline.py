"""Staged pipeline orchestration: dependency-checked stages over a shared
content-addressed store, per-stage metric files, and deterministic exports.

Each stage is idempotent: re-running with an unchanged config appends a skip
record and leaves artifacts untouched. A single root seed feeds named
per-stage streams, so no stage consumes another stage's randomness.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import torch

from . import artifacts
from .codec import pretrain_codec
from .config import RunConfig, config_hash
from .backends import train_alt_decoder, train_autoencoder
from .data import CLASS_NAMES, STYLE_NAMES, DatasetHandle, ingest_dataset, synth_concept_dataset
from .detection import UserKeyring, decide, detection_threshold, trace_bits
from .diffusion import (
    NULL_TOKEN,
    ModelCheckpoint,
    NoiseSchedule,
    PromptSpec,
    build_embedding_table,
    embed_prompt,
    instance_prompt,
    prior_prompt,
    train_denoiser,
)
from .distortions import standard_suite
from .ecwt import generate_images, train_concept_watermark
from .errors import ConfigError, DependencyError, ValidationError
from .evaluation import (
    inference_ablation_sweep,
    protection_eval,
    robustness_sweep,
)
from .iapi import build_adversarial_watermark, surrogate_finetune
from .message import Message
from .metrics import psnr, ssim
from .rng import RngStream
from .store import CheckpointStore, RunManifest, StageRecord, StageTimer

STAGE_ORDER = [
    "train-base",
    "pretrain-codec",
    "protect",
    "embed-concept",
    "generate",
    "detect",
    "trace",
    "evaluate",
    "ablate",
]

STAGE_DEPS = {
    "train-base": [],
    "pretrain-codec": ["train-base"],
    "protect": ["train-base", "pretrain-codec"],
    "embed-concept": ["train-base", "pretrain-codec", "protect"],
    "generate": ["train-base", "embed-concept"],
    "detect": ["pretrain-codec", "protect", "generate"],
    "trace": ["train-base", "pretrain-codec"],
    "evaluate": ["train-base", "pretrain-codec", "protect", "embed-concept"],
    "ablate": ["train-base", "pretrain-codec", "protect", "embed-concept"],
}

# sections that define a run's identity: everything a trained artifact depends on
RUN_IDENTITY_SECTIONS = (
    "dataset", "backend", "diffusion", "codec", "distortions", "iapi", "ecwt",
)

# config sections whose values feed each stage's config hash
STAGE_SECTIONS = {
    "train-base": ["dataset", "backend", "diffusion"],
    "pretrain-codec": ["dataset", "backend", "diffusion", "codec", "distortions"],
    "protect": ["dataset", "backend", "diffusion", "codec", "distortions", "iapi"],
    "embed-concept": ["dataset", "backend", "diffusion", "codec", "distortions", "iapi", "ecwt"],
    "generate": ["dataset", "backend", "diffusion", "codec", "distortions", "iapi", "ecwt", "sample"],
    "detect": ["dataset", "backend", "diffusion", "codec", "distortions", "iapi", "ecwt", "sample", "detect"],
    "trace": ["dataset", "backend", "diffusion", "codec", "distortions", "trace"],
    "evaluate": ["dataset", "backend", "diffusion", "codec", "distortions", "iapi", "ecwt", "evaluate"],
    "ablate": ["dataset", "backend", "diffusion", "codec", "distortions", "iapi", "ecwt", "ablate"],
}


class RunContext:
    """Paths, store, manifest and the root RNG for one run directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out_dir = Path(cfg.paths.out_dir)
        store_dir = cfg.paths.store_dir or str(self.out_dir / "store")
        self.store = CheckpointStore(store_dir)
        self.run_id = config_hash(cfg, *RUN_IDENTITY_SECTIONS)[:16]
        self.manifest = RunManifest(self.out_dir, self.run_id)
        self.root = RngStream(cfg.seed, "root")
        self._dataset = None

    def stream(self, stage: str) -> RngStream:
        return self.root.child(f"stage/{stage}")

    def dataset(self) -> tuple[DatasetHandle, list]:
        if self._dataset is None:
            dc = self.cfg.dataset
            if dc.source == "synth":
                self._dataset = synth_concept_dataset(dc, self.cfg.seed)
            else:
                folder = self.cfg.paths.data_dir or dc.folder
                if not folder:
                    raise ConfigError("folder dataset requires paths.data_dir or dataset.folder")
                handle = ingest_dataset(
                    folder, dc.image_size, dc.center_crop, dc.skip_bad
                )
                self._dataset = (handle, [])
        return self._dataset

    def concept(self):
        handle, concepts = self.dataset()
        idx = self.cfg.dataset.concept_index
        if not concepts or idx >= len(concepts):
            raise ConfigError(f"concept_index {idx} out of range")
        return handle, concepts[idx]

    def metrics_path(self, stage: str) -> Path:
        path = self.out_dir / "metrics"
        path.mkdir(parents=True, exist_ok=True)
        return path / f"{stage}.jsonl"

    def write_metrics(self, stage: str, records: list[dict]) -> str:
        path = self.metrics_path(stage)
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return str(path)

    def artifact(self, stage: str, name: str) -> str:
        digest = self.manifest.artifact(stage, name)
        if digest is None:
            raise DependencyError(
                f"stage {stage!r} has not produced artifact {name!r}", [stage]
            )
        return digest


def vocabulary(cfg: RunConfig) -> list[str]:
    concept_tokens = [f"sks{i}" for i in range(cfg.dataset.n_concepts)]
    return ["a", "of", *STYLE_NAMES, *CLASS_NAMES, *concept_tokens]


def schedule_params(cfg: RunConfig) -> dict:
    d = cfg.diffusion
    return {"T": d.timesteps, "beta_start": d.beta_start, "beta_end": d.beta_end}


# ---------------------------------------------------------------------------
# stage implementations


def _stage_train_base(ctx: RunContext) -> tuple[dict, list[dict]]:
    cfg = ctx.cfg
    handle, _ = ctx.dataset()
    rng = ctx.stream("train-base")

    backend = train_autoencoder(
        handle.images, rng.child("autoencoder"),
        latent_channels=cfg.backend.latent_channels, hidden=cfg.backend.hidden_channels,
        steps=cfg.backend.train_steps, batch_size=cfg.backend.batch_size, lr=cfg.backend.lr,
    )
    alt = train_alt_decoder(
        backend, handle.images, rng.child("alt-decoder"),
        hidden=cfg.backend.hidden_channels, steps=cfg.backend.alt_decoder_steps,
        batch_size=cfg.backend.batch_size, lr=cfg.backend.lr,
    )
    with torch.no_grad():
        probe = handle.images[: min(64, len(handle))]
        recon = backend.decode(backend.encode(probe))
        recon_psnr = psnr(probe, recon)
        recon_alt = psnr(probe, alt.decode(alt.encode(probe)))
    backend.meta["recon_psnr"] = recon_psnr
    alt.meta["recon_psnr"] = recon_alt

    table = build_embedding_table(vocabulary(cfg), cfg.diffusion.cond_dim, rng.child("embeddings"))
    schedule = NoiseSchedule.linear(**schedule_params(cfg))

    base_ids = handle.base_pool_ids()
    base_images = handle.subset(base_ids)
    with torch.no_grad():
        latents = torch.cat(
            [backend.encode(base_images[i : i + 64]) for i in range(0, len(base_ids), 64)]
        )
    conds = []
    index = {i: k for k, i in enumerate(handle.ids)}
    for image_id in base_ids:
        k = index[image_id]
        tokens = ("a", handle.style_names[k], "of", handle.class_names[k])
        vecs = torch.stack([table[t] for t in tokens])
        conds.append(vecs.mean(dim=0))
    conds = torch.stack(conds)

    versions = {}
    curves = {}
    for tag, channels, child in (
        ("v-a", cfg.diffusion.channels, "denoiser/v-a"),
        ("v-b", cfg.diffusion.alt_channels, "denoiser/v-b"),
    ):
        model, curve = train_denoiser(
            latents, conds, schedule, table, rng.child(child),
            steps=cfg.diffusion.train_steps, batch_size=cfg.diffusion.batch_size,
            lr=cfg.diffusion.lr, guidance_dropout=cfg.diffusion.guidance_dropout,
            channels=channels, version_tag=tag,
        )
        versions[tag] = model
        curves[tag] = curve

    outputs = {
        "backend_primary": artifacts.save_backend(ctx.store, backend),
        "backend_alt": artifacts.save_backend(ctx.store, alt),
        "base_v-a": artifacts.save_model(ctx.store, versions["v-a"], schedule_params(cfg)),
        "base_v-b": artifacts.save_model(ctx.store, versions["v-b"], schedule_params(cfg)),
    }
    records = [
        {"metric": "autoencoder_recon_psnr", "value": recon_psnr},
        {"metric": "alt_decoder_recon_psnr", "value": recon_alt},
        {"metric": "base_loss_first", "version": "v-a", "value": curves["v-a"][0]},
        {"metric": "base_loss_last", "version": "v-a", "value": curves["v-a"][-1]},
        {"metric": "base_loss_first", "version": "v-b", "value": curves["v-b"][0]},
        {"metric": "base_loss_last", "version": "v-b", "value": curves["v-b"][-1]},
    ]
    return outputs, records


def _stage_pretrain_codec(ctx: RunContext) -> tuple[dict, list[dict]]:
    cfg = ctx.cfg
    handle, _ = ctx.dataset()
    backend = artifacts.load_backend(ctx.store, ctx.artifact("train-base", "backend_primary"))
    rng = ctx.stream("pretrain-codec")
    pool = []
    if cfg.codec.distortion_layer:
        from .distortions import DistortionSpec

        pool = standard_suite("table5_pretrain", cfg.distortions) + [DistortionSpec("identity")]
    codec = pretrain_codec(handle.images, backend, pool, cfg.codec, rng)
    outputs = {"codec": artifacts.save_codec(ctx.store, codec)}
    records = [
        {"metric": "codec_curve", "step": c["step"], "total": c["total"],
         "message": c["message"], "perceptual": c["perceptual"], "ppd": c["ppd"],
         "bit_acc": c["bit_acc"]}
        for c in codec.training_metadata["curve"]
    ]
    return outputs, records


def _stage_protect(ctx: RunContext) -> tuple[dict, list[dict]]:
    cfg = ctx.cfg
    handle, concept = ctx.concept()
    backend = artifacts.load_backend(ctx.store, ctx.artifact("train-base", "backend_primary"))
    codec = artifacts.load_codec(ctx.store, ctx.artifact("pretrain-codec", "codec"))
    base = artifacts.load_model(ctx.store, ctx.artifact("train-base", "base_v-a"))
    rng = ctx.stream("protect")

    message = Message.random(cfg.codec.message_bits, rng.child("user-message"))
    prompts = (
        instance_prompt(concept.token, concept.class_name),
        prior_prompt(concept.class_name),
    )
    prior_imgs = generate_images(
        base, backend, prompts[1], 8, rng.child("prior"),
        steps=cfg.ecwt.sample_steps, size=cfg.dataset.image_size,
    )
    with torch.no_grad():
        prior_latents = backend.encode(prior_imgs)
    refs = handle.subset(concept.ref_ids)
    surrogate = surrogate_finetune(
        base, refs, concept.ref_ids, concept.instance_ids, backend, prompts,
        prior_latents, cfg.iapi, rng.child("surrogate"),
    )

    perts = {}
    records = []
    for image_id in concept.instance_ids:
        x = handle.subset([image_id])
        wm = build_adversarial_watermark(
            codec, backend, surrogate, x, image_id, message, prompts[0],
            cfg.iapi, rng.child(f"pgd/{image_id}"),
        )
        perts[image_id] = wm
        records.append({"metric": "perturbation_audit", "image_id": image_id, **wm.audit})
    outputs = {
        "perturbations": artifacts.save_perturbations(ctx.store, perts, message),
        "surrogate": artifacts.save_model(ctx.store, surrogate, schedule_params(cfg)),
    }
    return outputs, records


def _stage_embed_concept(ctx: RunContext) -> tuple[dict, list[dict]]:
    cfg = ctx.cfg
    handle, concept = ctx.concept()
    backend = artifacts.load_backend(ctx.store, ctx.artifact("train-base", "backend_primary"))
    codec = artifacts.load_codec(ctx.store, ctx.artifact("pretrain-codec", "codec"))
    base = artifacts.load_model(ctx.store, ctx.artifact("train-base", "base_v-a"))
    perts, message = artifacts.load_perturbations(
        ctx.store, ctx.artifact("protect", "perturbations")
    )
    rng = ctx.stream("embed-concept")
    result = train_concept_watermark(
        base, backend, codec, message,
        handle.subset(concept.instance_ids), concept.instance_ids, perts,
        concept.token, concept.class_name, cfg.ecwt, rng,
    )
    outputs = {
        "concept_model": artifacts.save_model(ctx.store, result.model, schedule_params(cfg)),
    }
    records = [{"metric": "ecwt_round", **m} for m in result.metrics]
    records.append(
        {"metric": "frozen_reference_hash", "value": result.frozen_hash_after}
    )
    return outputs, records


def _prompt_for(cfg: RunConfig, concept, style: str = "photo", prior: bool = False) -> PromptSpec:
    if prior:
        return prior_prompt(concept.class_name, style)
    return instance_prompt(concept.token, concept.class_name, style)


def _stage_generate(ctx: RunContext) -> tuple[dict, list[dict]]:
    cfg = ctx.cfg
    _, concept = ctx.concept()
    backend = artifacts.load_backend(ctx.store, ctx.artifact("train-base", "backend_primary"))
    model = artifacts.load_model(ctx.store, ctx.artifact("embed-concept", "concept_model"))
    rng = ctx.stream("generate")
    sc = cfg.sample
    images = generate_images(
        model, backend, _prompt_for(cfg, concept), sc.n_images, rng.child("sample"),
        steps=sc.steps, size=sc.size, guidance_scale=sc.guidance_scale, sampler=sc.sampler,
    )
    meta = {
        "prompt_style": "photo",
        "concept_token": concept.token,
        "sampler": sc.sampler,
        "steps": sc.steps,
        "guidance_scale": sc.guidance_scale,
        "size": sc.size,
    }
    outputs = {"generations": artifacts.save_images(ctx.store, images, meta)}
    records = [{"metric": "generated_images", "count": sc.n_images, **meta}]
    return outputs, records


def _stage_detect(ctx: RunContext) -> tuple[dict, list[dict]]:
    cfg = ctx.cfg
    codec = artifacts.load_codec(ctx.store, ctx.artifact("pretrain-codec", "codec"))
    _, message = artifacts.load_perturbations(ctx.store, ctx.artifact("protect", "perturbations"))
    images, meta = artifacts.load_images(ctx.store, ctx.artifact("generate", "generations"))
    with torch.no_grad():
        bits = codec.extract_bits(images)
    records = []
    for i in range(bits.shape[0]):
        res = decide(bits[i].numpy(), message, cfg.detect.fpr)
        records.append(
            {
                "image_index": i,
                "match_count": res.match_count,
                "n_bits": res.n_bits,
                "bit_accuracy": res.bit_accuracy,
                "p_value": res.p_value,
                "threshold": res.threshold,
                "decision": res.decision,
            }
        )
    return {}, records


def _stage_trace(ctx: RunContext) -> tuple[dict, list[dict]]:
    cfg = ctx.cfg
    handle, _ = ctx.dataset()
    backend = artifacts.load_backend(ctx.store, ctx.artifact("train-base", "backend_primary"))
    codec = artifacts.load_codec(ctx.store, ctx.artifact("pretrain-codec", "codec"))
    rng = ctx.stream("trace")
    tc = cfg.trace
    keyring = UserKeyring(
        entries={
            f"user{u:04d}": Message.random(cfg.codec.message_bits, rng.child(f"key/{u}"))
            for u in range(tc.n_users)
        }
    )
    pool_ids = handle.base_pool_ids() or handle.ids
    records = []
    correct = 0
    total = 0
    for u in range(tc.n_users):
        user_id = f"user{u:04d}"
        key = keyring.entries[user_id]
        ids = [pool_ids[(u * tc.images_per_user + j) % len(pool_ids)] for j in range(tc.images_per_user)]
        x = handle.subset(ids)
        with torch.no_grad():
            z = backend.encode(x)
            z_w, _ = codec.embed(z, key)
            imgs = backend.decode(z_w).clamp(0.0, 1.0)
            bits = codec.extract_bits(imgs)
        for j in range(bits.shape[0]):
            traced, res = trace_bits(bits[j].numpy(), keyring, tc.fpr)
            records.append(
                {
                    "user_id": user_id,
                    "image_id": ids[j],
                    "traced_user": traced,
                    "bit_accuracy": res.bit_accuracy,
                    "p_value": res.p_value,
                    "decision": res.decision,
                }
            )
            total += 1
            correct += int(traced == user_id)
    records.append({"metric": "trace_accuracy", "value": correct / total, "n_images": total})
    return {}, records


def _bound_table2_suite(ctx: RunContext, backend, alt_backend, base_model):
    suite = standard_suite("table2", ctx.cfg.distortions)
    for spec in suite:
        if spec.kind == "vae_compress":
            spec.runtime["backend"] = alt_backend
        elif spec.kind == "diffusion_regen":
            spec.runtime["backend"] = backend
            spec.runtime["model"] = base_model
    return suite


def _stage_evaluate(ctx: RunContext) -> tuple[dict, list[dict]]:
    cfg = ctx.cfg
    handle, concept = ctx.concept()
    backend = artifacts.load_backend(ctx.store, ctx.artifact("train-base", "backend_primary"))
    alt_backend = artifacts.load_backend(ctx.store, ctx.artifact("train-base", "backend_alt"))
    codec = artifacts.load_codec(ctx.store, ctx.artifact("pretrain-codec", "codec"))
    base_va = artifacts.load_model(ctx.store, ctx.artifact("train-base", "base_v-a"))
    base_vb = artifacts.load_model(ctx.store, ctx.artifact("train-base", "base_v-b"))
    model = artifacts.load_model(ctx.store, ctx.artifact("embed-concept", "concept_model"))
    perts, message = artifacts.load_perturbations(ctx.store, ctx.artifact("protect", "perturbations"))
    rng = ctx.stream("evaluate")
    ec = cfg.evaluate
    records = []

    suite = _bound_table2_suite(ctx, backend, alt_backend, base_va)
    sweep = robustness_sweep(
        model, backend, codec, message, _prompt_for(cfg, concept), suite,
        ec.n_images, ec.fpr, rng.child("robustness"),
        steps=cfg.sample.steps, guidance_scale=cfg.sample.guidance_scale,
        size=cfg.dataset.image_size,
    )
    for row in sweep.rows:
        records.append({"metric": "robustness_row", **row.as_record()})
    records.append(
        {"metric": "robustness_context",
         "paper_average_reference": sweep.metadata["paper_reference_average_bit_accuracy"]}
    )

    # watermark fidelity on the instance pool
    x_a = handle.subset(concept.instance_ids)
    phi = torch.stack([perts[i].phi for i in concept.instance_ids])
    sigma1 = torch.stack([perts[i].sigma1 for i in concept.instance_ids])
    protected = (x_a + phi).clamp(0.0, 1.0)
    wm_only = (x_a + sigma1).clamp(0.0, 1.0)
    records.append(
        {"metric": "fidelity", "psnr_protected": psnr(x_a, protected),
         "ssim_protected": ssim(x_a, protected), "psnr_watermark_only": psnr(x_a, wm_only),
         "ssim_watermark_only": ssim(x_a, wm_only)}
    )

    holdout = handle.subset(concept.holdout_ids[: ec.protection.holdout_images])
    prompts = (
        instance_prompt(concept.token, concept.class_name),
        prior_prompt(concept.class_name),
    )
    pcfg = ec.protection

    def run_protection(tag, attacker, protected_set):
        report = protection_eval(
            protected_set, x_a, attacker, backend, prompts, holdout,
            rng.child(f"protection/{tag}"), ft_steps=pcfg.ft_steps, ft_lr=pcfg.ft_lr,
            n_generations=pcfg.n_generations, probe_draws=pcfg.probe_draws,
            sample_steps=cfg.ecwt.sample_steps,
        )
        records.append({"metric": "protection", "setting": tag, **report})
        return report

    run_protection("same-version", base_va, protected)
    run_protection("zero-eta-control", base_va, wm_only)
    run_protection("cross-version", base_vb, protected)
    return {}, records


def _stage_ablate(ctx: RunContext) -> tuple[dict, list[dict]]:
    cfg = ctx.cfg
    _, concept = ctx.concept()
    backend = artifacts.load_backend(ctx.store, ctx.artifact("train-base", "backend_primary"))
    alt_backend = artifacts.load_backend(ctx.store, ctx.artifact("train-base", "backend_alt"))
    codec = artifacts.load_codec(ctx.store, ctx.artifact("pretrain-codec", "codec"))
    model = artifacts.load_model(ctx.store, ctx.artifact("embed-concept", "concept_model"))
    _, message = artifacts.load_perturbations(ctx.store, ctx.artifact("protect", "perturbations"))
    rng = ctx.stream("ablate")
    ac = cfg.ablate
    sweep = inference_ablation_sweep(
        model, backend, alt_backend, codec, message, _prompt_for(cfg, concept),
        ac.n_images, ac.fpr, rng.child("grid"),
        steps_axis=tuple(ac.steps_axis), sampler_axis=tuple(ac.sampler_axis),
        guidance_axis=tuple(ac.guidance_axis), size_axis=tuple(ac.size_axis),
        default_steps=cfg.sample.steps, default_sampler=cfg.sample.sampler,
        default_guidance=cfg.sample.guidance_scale, default_size=cfg.dataset.image_size,
    )
    records = [{"metric": "ablation_row", **row.as_record()} for row in sweep.rows]
    return {}, records


_STAGE_FNS = {
    "train-base": _stage_train_base,
    "pretrain-codec": _stage_pretrain_codec,
    "protect": _stage_protect,
    "embed-concept": _stage_embed_concept,
    "generate": _stage_generate,
    "detect": _stage_detect,
    "trace": _stage_trace,
    "evaluate": _stage_evaluate,
    "ablate": _stage_ablate,
}


def run_stage(stage: str, cfg: RunConfig, ctx: RunContext | None = None) -> RunContext:
    """Execute one stage (dependency-checked, idempotent on config hash)."""
    if stage not in _STAGE_FNS:
        raise ConfigError(f"unknown stage {stage!r}; valid stages: {STAGE_ORDER}")
    ctx = ctx or RunContext(cfg)
    stage_hash = config_hash(cfg, *STAGE_SECTIONS[stage])

    missing = [dep for dep in STAGE_DEPS[stage] if ctx.manifest.completed(dep) is None]
    if missing:
        ordered = [s for s in STAGE_ORDER if s in missing]
        raise DependencyError(
            f"stage {stage!r} requires prior stages: {', '.join(ordered)}", ordered
        )

    done = ctx.manifest.completed(stage)
    if done is not None and done.config_hash == stage_hash:
        ctx.manifest.append(
            StageRecord(
                stage=stage, status="skipped", config_hash=stage_hash,
                inputs=done.inputs, outputs=done.outputs,
                metrics_path=done.metrics_path, wall_time_s=0.0,
            )
        )
        return ctx
    if done is not None and done.config_hash != stage_hash:
        raise ValidationError(
            f"stage {stage!r} was completed with a different config "
            f"({done.config_hash[:12]} != {stage_hash[:12]}); use a fresh out dir"
        )

    inputs = {}
    for dep in STAGE_DEPS[stage]:
        rec = ctx.manifest.completed(dep)
        for name, digest in rec.outputs.items():
            if not ctx.store.has(digest):
                raise ValidationError(f"artifact {name}={digest[:12]} missing from store")
            inputs[f"{dep}/{name}"] = digest

    with StageTimer() as timer:
        outputs, records = _STAGE_FNS[stage](ctx)
    metrics_path = ctx.write_metrics(stage, records)
    ctx.manifest.append(
        StageRecord(
            stage=stage, status="completed", config_hash=stage_hash,
            inputs=inputs, outputs=outputs, metrics_path=metrics_path,
            wall_time_s=timer.elapsed,
        )
    )
    return ctx


# ---------------------------------------------------------------------------
# metric export


def _flatten(record: dict, prefix: str = "") -> dict:
    flat = {}
    for key in sorted(record):
        value = record[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, prefix=f"{name}."))
        else:
            flat[name] = value
    return flat


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export_metrics(ctx: RunContext, formats: tuple[str, ...] = ("csv", "jsonl")) -> list[Path]:
    """Flatten all completed stages' metric records into stable-order files.

    Exports are deterministic: records keep stage order, columns are sorted,
    and re-export is byte-identical.
    """
    completed = [r for r in ctx.manifest.records if r.status == "completed"]
    if not completed:
        raise ValidationError("no completed stages to export")
    seen = set()
    rows = []
    for rec in completed:
        if rec.stage in seen or rec.metrics_path is None:
            continue
        seen.add(rec.stage)
        with open(rec.metrics_path) as fh:
            for i, line in enumerate(fh):
                data = json.loads(line)
                rows.append({"stage": rec.stage, "record_index": i, **_flatten(data)})
    export_dir = ctx.out_dir / "exports"
    export_dir.mkdir(parents=True, exist_ok=True)
    written = []
    columns = ["stage", "record_index"] + sorted(
        {k for row in rows for k in row} - {"stage", "record_index"}
    )
    if "csv" in formats:
        path = export_dir / "metrics.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_format_cell(row.get(c)) for c in columns])
        written.append(path)
    if "jsonl" in formats:
        path = export_dir / "metrics.jsonl"
        with open(path, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        written.append(path)
    return written
