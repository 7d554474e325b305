"""Save/load of trained artifacts through the content-addressed store.

Each artifact kind packs float32 parameter payloads plus enough JSON
metadata to rebuild the owning object exactly (schedules are re-derived
from their defining scalars, so float64 tables never hit the store).
"""

from __future__ import annotations

import numpy as np
import torch

from .backends import ConvDecoder, ConvEncoder, LearnedBackend, OrthogonalBackend
from .codec import CodecCheckpoint, MessageEncoder, PixelDecoder
from .config import CodecSettings
from .diffusion import ModelCheckpoint, NoiseSchedule, ToyDenoiser
from .errors import ValidationError
from .iapi import AdversarialWatermark
from .message import Message
from .store import CheckpointStore


def _state_to_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}/{name}": p.detach().cpu().numpy().astype("<f4")
        for name, p in module.state_dict().items()
    }


def _load_state(module: torch.nn.Module, arrays: dict, prefix: str) -> None:
    state = {
        name[len(prefix) + 1 :]: torch.from_numpy(arr.copy())
        for name, arr in arrays.items()
        if name.startswith(prefix + "/")
    }
    module.load_state_dict(state)


# ---------------------------------------------------------------------------
# latent backends


def save_backend(store: CheckpointStore, backend) -> str:
    if isinstance(backend, OrthogonalBackend):
        meta = {"kind": backend.kind, "block": backend.block, "seed": backend.seed}
        return store.put("latent_backend", meta, {})
    meta = {
        "kind": backend.kind,
        "tag": backend.tag,
        "latent_channels": backend.latent_channels,
        "hidden": backend.encoder.net[0].out_channels,
        "meta": backend.meta,
    }
    arrays = _state_to_arrays(backend.encoder, "enc")
    arrays.update(_state_to_arrays(backend.decoder, "dec"))
    arrays["latent_mean"] = backend.latent_mean.numpy().astype("<f4")
    arrays["latent_std"] = backend.latent_std.numpy().astype("<f4")
    return store.put("latent_backend", meta, arrays)


def load_backend(store: CheckpointStore, digest: str):
    kind, meta, arrays = store.get(digest)
    if kind != "latent_backend":
        raise ValidationError(f"artifact {digest} is a {kind}, not a latent_backend")
    if meta["kind"] == "fixed_orthogonal":
        return OrthogonalBackend(block=meta["block"], seed=meta["seed"])
    enc = ConvEncoder(meta["latent_channels"], meta["hidden"])
    dec = ConvDecoder(meta["latent_channels"], meta["hidden"])
    _load_state(enc, arrays, "enc")
    _load_state(dec, arrays, "dec")
    backend = LearnedBackend(
        encoder=enc,
        decoder=dec,
        latent_mean=torch.from_numpy(arrays["latent_mean"].copy()),
        latent_std=torch.from_numpy(arrays["latent_std"].copy()),
        tag=meta["tag"],
        meta=meta["meta"],
    )
    return backend.freeze()


# ---------------------------------------------------------------------------
# codec


def save_codec(store: CheckpointStore, codec: CodecCheckpoint) -> str:
    meta = {
        "config": codec.config.__dict__,
        "latent_shape": list(codec.latent_shape),
        "training_metadata": codec.training_metadata,
    }
    arrays = _state_to_arrays(codec.encoder, "enc")
    arrays.update(_state_to_arrays(codec.decoder, "dec"))
    arrays["logit_bias"] = codec.logit_bias.detach().numpy().astype("<f4")
    return store.put("codec", meta, arrays)


def load_codec(store: CheckpointStore, digest: str) -> CodecCheckpoint:
    kind, meta, arrays = store.get(digest)
    if kind != "codec":
        raise ValidationError(f"artifact {digest} is a {kind}, not a codec")
    cfg = CodecSettings(**meta["config"])
    latent_shape = tuple(meta["latent_shape"])
    encoder = MessageEncoder(cfg, latent_shape)
    decoder = PixelDecoder(cfg)
    _load_state(encoder, arrays, "enc")
    _load_state(decoder, arrays, "dec")
    codec = CodecCheckpoint(
        encoder=encoder,
        decoder=decoder,
        config=cfg,
        latent_shape=latent_shape,
        logit_bias=torch.from_numpy(arrays["logit_bias"].copy()),
        training_metadata=meta["training_metadata"],
    )
    return codec.freeze()


# ---------------------------------------------------------------------------
# diffusion model checkpoints


def save_model(store: CheckpointStore, model: ModelCheckpoint, schedule_params: dict) -> str:
    meta = {
        "version_tag": model.version_tag,
        "schedule": schedule_params,
        "arch": {
            "latent_channels": model.denoiser.latent_channels,
            "channels": model.denoiser.channels,
            "cond_dim": model.denoiser.cond_dim,
        },
        "tokens": sorted(model.embedding_table),
    }
    arrays = _state_to_arrays(model.denoiser, "net")
    for tok, vec in model.embedding_table.items():
        arrays[f"emb/{tok}"] = vec.detach().numpy().astype("<f4")
    return store.put("denoiser", meta, arrays)


def load_model(store: CheckpointStore, digest: str) -> ModelCheckpoint:
    kind, meta, arrays = store.get(digest)
    if kind != "denoiser":
        raise ValidationError(f"artifact {digest} is a {kind}, not a denoiser")
    arch = meta["arch"]
    net = ToyDenoiser(arch["latent_channels"], arch["channels"], arch["cond_dim"])
    _load_state(net, arrays, "net")
    table = {
        tok: torch.from_numpy(arrays[f"emb/{tok}"].copy()) for tok in meta["tokens"]
    }
    sp = meta["schedule"]
    schedule = NoiseSchedule.linear(T=sp["T"], beta_start=sp["beta_start"], beta_end=sp["beta_end"])
    return ModelCheckpoint(net, table, schedule, version_tag=meta["version_tag"])


# ---------------------------------------------------------------------------
# perturbation archives


def save_perturbations(
    store: CheckpointStore, perts: dict[str, AdversarialWatermark], message: Message
) -> str:
    ids = sorted(perts)
    meta = {
        "ids": ids,
        "eta": perts[ids[0]].eta if ids else None,
        "message": message.to_string(),
        "audits": {i: perts[i].audit for i in ids},
    }
    arrays = {}
    for i in ids:
        arrays[f"{i}/sigma1"] = perts[i].sigma1.numpy().astype("<f4")
        arrays[f"{i}/sigma2"] = perts[i].sigma2.numpy().astype("<f4")
    return store.put("perturbations", meta, arrays)


def load_perturbations(
    store: CheckpointStore, digest: str
) -> tuple[dict[str, AdversarialWatermark], Message]:
    kind, meta, arrays = store.get(digest)
    if kind != "perturbations":
        raise ValidationError(f"artifact {digest} is a {kind}, not perturbations")
    perts = {}
    for i in meta["ids"]:
        perts[i] = AdversarialWatermark(
            sigma1=torch.from_numpy(arrays[f"{i}/sigma1"].copy()),
            sigma2=torch.from_numpy(arrays[f"{i}/sigma2"].copy()),
            source_image_id=i,
            eta=meta["eta"],
            audit=meta["audits"][i],
        )
    return perts, Message.from_string(meta["message"])


# ---------------------------------------------------------------------------
# image batches


def save_images(store: CheckpointStore, images: torch.Tensor, meta: dict) -> str:
    return store.put("images", meta, {"images": images.detach().numpy().astype("<f4")})


def load_images(store: CheckpointStore, digest: str) -> tuple[torch.Tensor, dict]:
    kind, meta, arrays = store.get(digest)
    if kind != "images":
        raise ValidationError(f"artifact {digest} is a {kind}, not images")
    return torch.from_numpy(arrays["images"].copy()), meta
