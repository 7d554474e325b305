"""Run configuration: dataclasses, JSON schema validation, config hashing.

A run config is a JSON file validated against the published schema
(configs/schema.json in the repository; regenerated by ``build_schema``).
Unknown keys are rejected. Environment variables may override paths only:
CONCEPTWM_OUT_DIR, CONCEPTWM_STORE_DIR, CONCEPTWM_DATA_DIR.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import jsonschema

from .errors import ConfigError

SCHEMA_VERSION = 1


@dataclass
class PathsConfig:
    out_dir: str = "runs/default"
    store_dir: str | None = None  # defaults to <out_dir>/store
    data_dir: str | None = None  # folder datasets only


@dataclass
class DatasetConfig:
    source: str = "synth"  # synth | folder
    image_size: int = 64
    n_concepts: int = 4
    images_per_concept: int = 18
    instance_per_concept: int = 5
    refs_per_concept: int = 5
    base_images: int = 1024
    concept_index: int = 0  # concept targeted by protect/embed/evaluate
    folder: str | None = None
    center_crop: bool = True
    skip_bad: bool = False


@dataclass
class BackendConfig:
    kind: str = "learned_autoencoder"  # learned_autoencoder | fixed_orthogonal
    latent_channels: int = 4
    hidden_channels: int = 48
    train_steps: int = 1200
    alt_decoder_steps: int = 800
    batch_size: int = 32
    lr: float = 2e-3


@dataclass
class CodecSettings:
    variant: str = "FLW"  # FLW | OLW
    message_bits: int = 32
    lambda_pips: float = 1.0
    mu_ppd: float = 0.25
    ppd_top_fraction: float = 0.05
    train_steps: int = 2500
    batch_size: int = 24
    learning_rate: float = 1e-3
    msg_channels: int = 8
    hidden_channels: int = 32
    distortion_layer: bool = True
    calibrate_bias: bool = True


@dataclass
class DiffusionConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    cond_dim: int = 24
    channels: int = 48
    alt_channels: int = 56  # width of the v-b checkpoint
    train_steps: int = 2600
    batch_size: int = 48
    lr: float = 2e-3
    guidance_dropout: float = 0.1


@dataclass
class DistortionDefaults:
    # frozen evaluation-time attack strengths
    brightness_delta: float = 0.3
    contrast_lo: float = 0.5
    contrast_hi: float = 1.5
    blur_sigma: float = 1.0
    blur_kernel: int = 5
    noise_std: float = 0.05
    jpeg_quality: int = 50
    crop_fraction: float = 0.7
    mask_fraction: float = 0.1
    regen_fraction: float = 0.15


@dataclass
class IapiConfig:
    eta: float = 4.0 / 255.0  # l-inf budget, normalized pixel units
    alpha: float = 1.0 / 255.0
    pgd_steps: int = 24
    surrogate_steps: int = 1
    surrogate_lr: float = 5e-4
    paper_eta: float = 1e-3  # reported budget, recorded as metadata only


@dataclass
class EcwtConfig:
    rounds: int = 50
    concept_steps_per_round: int = 10
    wm_steps_per_round: int = 10
    lambda_prior: float = 1.0
    concept_lr: float = 1e-3
    wm_lr: float = 1e-3
    wm_t_lo: float = 0.1
    wm_t_hi: float = 0.6
    n_prior_images: int = 16
    prompt_pool: list[str] = field(default_factory=lambda: ["photo", "painting", "cropped"])
    n_adapt_per_prompt: int = 4
    adapt_every: int = 10
    sample_steps: int = 30


@dataclass
class SampleConfig:
    sampler: str = "ddim"  # ddim | ancestral | heun
    steps: int = 50
    guidance_scale: float = 7.5
    size: int = 64
    n_images: int = 16
    batch_size: int = 64


@dataclass
class DetectConfig:
    fpr: float = 1e-5


@dataclass
class TraceConfig:
    n_users: int = 100
    images_per_user: int = 10
    fpr: float = 1e-3


@dataclass
class ProtectionEvalConfig:
    ft_steps: int = 250
    ft_lr: float = 1e-3
    n_generations: int = 24
    holdout_images: int = 8
    probe_draws: int = 64


@dataclass
class EvaluateConfig:
    n_images: int = 200
    fpr: float = 1e-3
    protection: ProtectionEvalConfig = field(default_factory=ProtectionEvalConfig)


@dataclass
class AblateConfig:
    n_images: int = 100
    steps_axis: list[int] = field(default_factory=lambda: [25, 50, 100])
    guidance_axis: list[float] = field(default_factory=lambda: [5.0, 7.5, 10.0])
    sampler_axis: list[str] = field(default_factory=lambda: ["ddim", "ancestral", "heun"])
    size_axis: list[int] = field(default_factory=lambda: [64, 96])
    fpr: float = 1e-3


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    codec: CodecSettings = field(default_factory=CodecSettings)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    distortions: DistortionDefaults = field(default_factory=DistortionDefaults)
    iapi: IapiConfig = field(default_factory=IapiConfig)
    ecwt: EcwtConfig = field(default_factory=EcwtConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)


_JSON_TYPES = {int: "integer", float: "number", str: "string", bool: "boolean"}


def _field_schema(ftype) -> dict:
    if is_dataclass(ftype):
        return _dataclass_schema(ftype)
    if ftype in _JSON_TYPES:
        return {"type": _JSON_TYPES[ftype]}
    s = str(ftype)
    if s in ("str | None", "typing.Optional[str]"):
        return {"type": ["string", "null"]}
    if s == "list[str]":
        return {"type": "array", "items": {"type": "string"}}
    if s == "list[int]":
        return {"type": "array", "items": {"type": "integer"}}
    if s == "list[float]":
        return {"type": "array", "items": {"type": "number"}}
    raise AssertionError(f"unhandled config field type: {ftype!r}")


def _dataclass_schema(cls) -> dict:
    hints = _resolve_types(cls)
    props = {f.name: _field_schema(hints[f.name]) for f in fields(cls)}
    return {"type": "object", "properties": props, "additionalProperties": False}


def build_schema() -> dict:
    """The published JSON schema for run config files."""
    schema = _dataclass_schema(RunConfig)
    schema["$schema"] = "http://json-schema.org/draft-07/schema#"
    schema["title"] = "conceptwm run configuration"
    # ints are valid JSON numbers; allow them where floats are expected
    return json.loads(json.dumps(schema).replace('{"type": "number"}', '{"type": ["number", "integer"]}'))


def _resolve_types(cls):
    # dataclasses store string annotations under `from __future__ import annotations`
    import typing

    return typing.get_type_hints(cls)


def _from_dict(cls, data: dict, path: str = ""):
    hints = _resolve_types(cls)
    kwargs = {}
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key: {path}{key}")
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        ftype = hints[f.name]
        if is_dataclass(ftype):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{f.name} must be an object")
            kwargs[f.name] = _from_dict(ftype, value, path=f"{path}{f.name}.")
        elif ftype is float and isinstance(value, int):
            kwargs[f.name] = float(value)
        else:
            kwargs[f.name] = value
    # build from defaults, then overwrite provided fields (keeps nested defaults)
    obj = cls()
    for k, v in kwargs.items():
        setattr(obj, k, v)
    return obj


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def validate_dict(data: dict) -> None:
    try:
        jsonschema.validate(data, build_schema())
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config rejected by schema: {exc.message}") from exc


def _semantic_checks(cfg: RunConfig) -> None:
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg.schema_version}")
    if cfg.dataset.source not in ("synth", "folder"):
        raise ConfigError(f"unknown dataset source {cfg.dataset.source!r}")
    if cfg.dataset.images_per_concept < 5:
        raise ConfigError("images_per_concept must be >= 5")
    if cfg.codec.variant not in ("FLW", "OLW"):
        raise ConfigError(f"unknown codec variant {cfg.codec.variant!r}")
    if not (0.0 < cfg.codec.ppd_top_fraction <= 1.0):
        raise ConfigError("ppd_top_fraction must be in (0, 1]")
    if cfg.codec.lambda_pips < 0 or cfg.codec.mu_ppd < 0:
        raise ConfigError("loss coefficients must be >= 0")
    if cfg.iapi.eta <= 0 or cfg.iapi.alpha <= 0:
        raise ConfigError("eta and alpha must be positive")
    if cfg.iapi.alpha > cfg.iapi.eta:
        raise ConfigError("alpha must not exceed eta")
    if cfg.ecwt.rounds < 1:
        raise ConfigError("ecwt.rounds must be >= 1")
    if not cfg.ecwt.prompt_pool:
        raise ConfigError("ecwt.prompt_pool must be nonempty")
    if not (0.0 <= cfg.ecwt.wm_t_lo < cfg.ecwt.wm_t_hi <= 1.0):
        raise ConfigError("need 0 <= wm_t_lo < wm_t_hi <= 1")
    if cfg.sample.sampler not in ("ddim", "ancestral", "heun"):
        raise ConfigError(f"unknown sampler {cfg.sample.sampler!r}")
    if cfg.sample.size not in (64, 96):
        raise ConfigError("generation size must be 64 or 96")
    if not (0.0 < cfg.detect.fpr < 1.0) or not (0.0 < cfg.trace.fpr < 1.0):
        raise ConfigError("fpr must be in (0, 1)")


def from_dict(data: dict) -> RunConfig:
    validate_dict(data)
    cfg = _from_dict(RunConfig, data)
    _apply_env_overrides(cfg)
    _semantic_checks(cfg)
    return cfg


def _apply_env_overrides(cfg: RunConfig) -> None:
    # env vars override paths only
    if v := os.environ.get("CONCEPTWM_OUT_DIR"):
        cfg.paths.out_dir = v
    if v := os.environ.get("CONCEPTWM_STORE_DIR"):
        cfg.paths.store_dir = v
    if v := os.environ.get("CONCEPTWM_DATA_DIR"):
        cfg.paths.data_dir = v


def load_config(path: str | Path) -> RunConfig:
    with open(path) as fh:
        data = json.load(fh)
    return from_dict(data)


def canonical_json(data: dict) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig, *sections: str) -> str:
    """Stable hash of the full config, or of named top-level sections."""
    data = to_dict(cfg)
    if sections:
        data = {k: data[k] for k in sorted(sections)}
        data["seed"] = cfg.seed
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()
