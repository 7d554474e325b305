"""Dataset ingestion and procedural concept image synthesis.

The synthetic corpus stands in for subject/style personalization data: each
concept is a (shape class, palette, texture) signature rendered at 64x64
with per-image jitter, in several "style" variants that are named by prompt
tokens (photo / painting / cropped / portrait). Concept pools are split into
disjoint instance (X_A), reference (X_B) and holdout sets by construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import DatasetConfig, canonical_json
from .errors import ConfigError, ValidationError
from .rng import RngStream

CLASS_NAMES = ["circle", "square", "triangle", "ring", "cross"]
STYLE_NAMES = ["photo", "painting", "cropped", "portrait"]
TEXTURES = ["plain", "stripes", "dots", "checker"]


@dataclass
class ConceptSet:
    concept_id: int
    token: str  # pseudo-word bound to this concept, e.g. "sks0"
    class_name: str
    instance_ids: list[str] = field(default_factory=list)  # X_A, used for concept learning
    ref_ids: list[str] = field(default_factory=list)  # X_B, clean references for IAPI
    holdout_ids: list[str] = field(default_factory=list)


@dataclass
class DatasetHandle:
    images: torch.Tensor  # (N,3,H,W) float32 in [0,1]
    ids: list[str]  # sorted, aligned with images
    class_names: list[str]
    style_names: list[str]
    concept_ids: list[int]  # -1 for base-pool images
    manifest_hash: str

    def __len__(self) -> int:
        return self.images.shape[0]

    def index_of(self, image_id: str) -> int:
        try:
            return self._index[image_id]
        except AttributeError:
            self._index = {i: k for k, i in enumerate(self.ids)}
            return self._index[image_id]

    def subset(self, ids: list[str]) -> torch.Tensor:
        return self.images[[self.index_of(i) for i in ids]]

    def base_pool_ids(self) -> list[str]:
        return [i for i, c in zip(self.ids, self.concept_ids) if c < 0]


def _grid(size: int):
    ys, xs = np.meshgrid(
        np.linspace(-1.0, 1.0, size), np.linspace(-1.0, 1.0, size), indexing="ij"
    )
    return ys, xs


def _shape_sdf(kind: str, ys, xs, cx: float, cy: float, r: float) -> np.ndarray:
    x, y = xs - cx, ys - cy
    if kind == "circle":
        return np.hypot(x, y) - r
    if kind == "square":
        return np.maximum(np.abs(x), np.abs(y)) - r
    if kind == "ring":
        return np.abs(np.hypot(x, y) - r * 0.8) - r * 0.3
    if kind == "cross":
        w = 0.35 * r
        bar_h = np.maximum(np.abs(x) - r, np.abs(y) - w)
        bar_v = np.maximum(np.abs(x) - w, np.abs(y) - r)
        return np.minimum(bar_h, bar_v)
    if kind == "triangle":
        # signed distance to the edges of an upright equilateral triangle
        ax, ay = 0.0, -r
        bx, by = -0.87 * r, 0.5 * r
        cx2, cy2 = 0.87 * r, 0.5 * r
        d = None
        for (px, py), (qx, qy) in [((ax, ay), (bx, by)), ((bx, by), (cx2, cy2)), ((cx2, cy2), (ax, ay))]:
            ex, ey = qx - px, qy - py
            norm = np.hypot(ex, ey)
            # inward normal for counter-clockwise vertex order
            nx, ny = ey / norm, -ex / norm
            dist = (x - px) * nx + (y - py) * ny
            d = dist if d is None else np.minimum(d, dist)
        return -d
    raise ConfigError(f"unknown shape class {kind!r}")


def _texture_field(spec: dict, ys, xs, rng: np.random.Generator) -> np.ndarray:
    kind = spec["kind"]
    freq = spec["freq"]
    theta = spec["theta"]
    phase = rng.uniform(0, 2 * np.pi)
    u = np.cos(theta) * xs + np.sin(theta) * ys
    v = -np.sin(theta) * xs + np.cos(theta) * ys
    if kind == "plain":
        return np.full_like(xs, 0.5)
    if kind == "stripes":
        return 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + phase)
    if kind == "dots":
        return 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + phase) * np.sin(
            2 * np.pi * freq * v + phase
        )
    if kind == "checker":
        s = np.sin(2 * np.pi * freq * u + phase) * np.sin(2 * np.pi * freq * v + phase)
        return 1.0 / (1.0 + np.exp(-8.0 * s))
    raise ConfigError(f"unknown texture {kind!r}")


def _smooth_field(size: int, rng: np.random.Generator, cells: int = 6) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells))
    t = torch.from_numpy(coarse)[None, None]
    up = torch.nn.functional.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return up[0, 0].numpy()


def _sample_palette(rng: np.random.Generator) -> dict:
    # keep foreground and background visually separated
    while True:
        bg1 = rng.uniform(0.08, 0.92, 3)
        bg2 = np.clip(bg1 + rng.uniform(-0.3, 0.3, 3), 0.05, 0.95)
        fg1 = rng.uniform(0.08, 0.92, 3)
        fg2 = np.clip(fg1 + rng.uniform(-0.4, 0.4, 3), 0.05, 0.95)
        if np.linalg.norm(fg1 - (bg1 + bg2) / 2) > 0.5:
            return {"bg1": bg1, "bg2": bg2, "fg1": fg1, "fg2": fg2}


def _sample_texture(rng: np.random.Generator) -> dict:
    return {
        "kind": TEXTURES[int(rng.integers(0, len(TEXTURES)))],
        "freq": float(rng.uniform(2.0, 5.0)),
        "theta": float(rng.uniform(0, np.pi)),
    }


def render_image(
    class_name: str,
    palette: dict,
    texture: dict,
    style: str,
    rng: np.random.Generator,
    size: int = 64,
) -> np.ndarray:
    """One (3,size,size) float32 image in [0,1]."""
    ys, xs = _grid(size)
    r = 0.45 * rng.uniform(0.85, 1.15)
    cx, cy = rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)
    if style == "cropped":
        r *= 1.45
    elif style == "portrait":
        r *= 1.22
        cy -= 0.12

    angle = rng.uniform(0, 2 * np.pi)
    g = 0.5 + 0.5 * (np.cos(angle) * xs + np.sin(angle) * ys) / 1.5
    bg = palette["bg1"][:, None, None] * (1 - g) + palette["bg2"][:, None, None] * g

    tex = _texture_field(texture, ys, xs, rng)
    fg = palette["fg1"][:, None, None] * (1 - tex) + palette["fg2"][:, None, None] * tex

    sdf = _shape_sdf(class_name, ys, xs, cx, cy, r)
    softness = 2.0 / size
    mask = 1.0 / (1.0 + np.exp(sdf / softness))

    img = bg * (1 - mask) + fg * mask

    if style == "painting":
        mottle = np.stack([_smooth_field(size, rng) for _ in range(3)])
        img = img + 0.12 * mottle
        from scipy.ndimage import gaussian_filter

        img = np.stack([gaussian_filter(c, sigma=0.7) for c in img])
    elif style == "portrait":
        vignette = 1.0 - 0.25 * np.clip(np.hypot(xs, ys) - 0.6, 0, 1)
        img = img * vignette

    img = img + 0.01 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _finish_handle(
    images: list[np.ndarray],
    ids: list[str],
    class_names: list[str],
    style_names: list[str],
    concept_ids: list[int],
) -> DatasetHandle:
    order = np.argsort(np.asarray(ids, dtype=object))
    images_t = torch.from_numpy(np.stack([images[i] for i in order]))
    ids_s = [ids[i] for i in order]
    per_image = [
        {"id": ids_s[k], "sha": hashlib.sha256(images_t[k].numpy().tobytes()).hexdigest()}
        for k in range(len(ids_s))
    ]
    manifest_hash = hashlib.sha256(canonical_json({"images": per_image}).encode()).hexdigest()
    return DatasetHandle(
        images=images_t,
        ids=ids_s,
        class_names=[class_names[i] for i in order],
        style_names=[style_names[i] for i in order],
        concept_ids=[concept_ids[i] for i in order],
        manifest_hash=manifest_hash,
    )


def synth_concept_dataset(
    cfg: DatasetConfig, seed: int
) -> tuple[DatasetHandle, list[ConceptSet]]:
    """Procedural corpus: a broad base pool plus per-concept X_A/X_B/holdout splits."""
    if cfg.images_per_concept < 5:
        raise ConfigError("images_per_concept must be >= 5 (paper regime is 5-8)")
    n_split = cfg.instance_per_concept + cfg.refs_per_concept
    if cfg.images_per_concept < n_split:
        raise ConfigError(
            f"images_per_concept={cfg.images_per_concept} smaller than instance+refs={n_split}"
        )
    root = RngStream(seed, "dataset")
    size = cfg.image_size

    images, ids, classes, styles, concept_ids = [], [], [], [], []

    base_rng = root.child("base")
    for i in range(cfg.base_images):
        rng = base_rng.spawn(i).numpy
        class_name = CLASS_NAMES[int(rng.integers(0, len(CLASS_NAMES)))]
        style = STYLE_NAMES[int(rng.integers(0, len(STYLE_NAMES)))]
        img = render_image(class_name, _sample_palette(rng), _sample_texture(rng), style, rng, size)
        images.append(img)
        ids.append(f"base/{i:05d}")
        classes.append(class_name)
        styles.append(style)
        concept_ids.append(-1)

    concepts = []
    for c in range(cfg.n_concepts):
        c_rng = root.child(f"concept{c}")
        setup = c_rng.child("setup").numpy
        class_name = CLASS_NAMES[c % len(CLASS_NAMES)]
        palette = _sample_palette(setup)
        texture = _sample_texture(setup)
        concept = ConceptSet(concept_id=c, token=f"sks{c}", class_name=class_name)
        for i in range(cfg.images_per_concept):
            rng = c_rng.spawn(i).numpy
            img = render_image(class_name, palette, texture, "photo", rng, size)
            if i < cfg.instance_per_concept:
                split, bucket = "a", concept.instance_ids
            elif i < n_split:
                split, bucket = "b", concept.ref_ids
            else:
                split, bucket = "h", concept.holdout_ids
            image_id = f"concept{c}/{split}/{i:03d}"
            bucket.append(image_id)
            images.append(img)
            ids.append(image_id)
            classes.append(class_name)
            styles.append("photo")
            concept_ids.append(c)
        concepts.append(concept)

    handle = _finish_handle(images, ids, classes, styles, concept_ids)
    for concept in concepts:
        overlap = set(concept.instance_ids) & set(concept.ref_ids)
        assert not overlap, "X_A and X_B must be disjoint by construction"
    return handle, concepts


def ingest_dataset(
    path: str | Path, resize_to: int = 64, center_crop: bool = True, skip_bad: bool = False
) -> DatasetHandle:
    """Load a folder of images, resized (and optionally center-cropped) to a square."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.is_file())
    if not files:
        raise ValidationError(f"no files found under {path}")
    images, ids = [], []
    for p in files:
        try:
            with Image.open(p) as im:
                im = im.convert("RGB")
                if center_crop:
                    w, h = im.size
                    scale = resize_to / min(w, h)
                    im = im.resize((round(w * scale), round(h * scale)), Image.BILINEAR)
                    w, h = im.size
                    left = (w - resize_to) // 2
                    top = (h - resize_to) // 2
                    im = im.crop((left, top, left + resize_to, top + resize_to))
                else:
                    im = im.resize((resize_to, resize_to), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except Exception as exc:
            if skip_bad:
                continue
            raise ValidationError(f"cannot decode {p.name}: {exc}") from exc
        images.append(arr.transpose(2, 0, 1))
        ids.append(p.name)
    if not images:
        raise ValidationError(f"no decodable images under {path}")
    n = len(images)
    return _finish_handle(images, ids, ["unknown"] * n, ["photo"] * n, [-1] * n)
