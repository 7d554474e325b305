import numpy as np
import pytest
import torch
from PIL import Image

from conceptwm.config import DatasetConfig
from conceptwm.data import (
    CLASS_NAMES,
    STYLE_NAMES,
    ingest_dataset,
    render_image,
    synth_concept_dataset,
)
from conceptwm.errors import ConfigError, ValidationError
from conceptwm.rng import RngStream


def small_cfg(**kw) -> DatasetConfig:
    base = dict(n_concepts=3, images_per_concept=14, base_images=48, image_size=32)
    base.update(kw)
    return DatasetConfig(**base)


def test_synth_deterministic():
    a, ca = synth_concept_dataset(small_cfg(), seed=5)
    b, cb = synth_concept_dataset(small_cfg(), seed=5)
    assert a.manifest_hash == b.manifest_hash
    assert torch.equal(a.images, b.images)
    assert [c.token for c in ca] == [c.token for c in cb]
    c, _ = synth_concept_dataset(small_cfg(), seed=6)
    assert a.manifest_hash != c.manifest_hash


def test_synth_ids_sorted_and_splits_disjoint():
    handle, concepts = synth_concept_dataset(small_cfg(), seed=1)
    assert handle.ids == sorted(handle.ids)
    for c in concepts:
        assert len(c.instance_ids) == 5
        assert len(c.ref_ids) == 5
        assert len(c.holdout_ids) == 4
        assert not (set(c.instance_ids) & set(c.ref_ids))
        assert not (set(c.instance_ids) & set(c.holdout_ids))
    assert len(handle.base_pool_ids()) == 48


def test_synth_rejects_tiny_concepts():
    with pytest.raises(ConfigError):
        synth_concept_dataset(small_cfg(images_per_concept=4), seed=0)


def test_images_normalized():
    handle, _ = synth_concept_dataset(small_cfg(), seed=2)
    assert handle.images.dtype == torch.float32
    assert float(handle.images.min()) >= 0.0
    assert float(handle.images.max()) <= 1.0
    assert handle.images.shape[1:] == (3, 32, 32)


def test_render_styles_differ():
    rng = np.random.default_rng(3)
    palette = {
        "bg1": np.array([0.2, 0.3, 0.8]), "bg2": np.array([0.3, 0.4, 0.9]),
        "fg1": np.array([0.9, 0.2, 0.1]), "fg2": np.array([0.8, 0.7, 0.2]),
    }
    texture = {"kind": "stripes", "freq": 3.0, "theta": 0.5}
    imgs = {}
    for style in STYLE_NAMES:
        imgs[style] = render_image("circle", palette, texture, style,
                                   np.random.default_rng(3), size=32)
    for a in STYLE_NAMES:
        for b in STYLE_NAMES:
            if a < b:
                assert float(np.abs(imgs[a] - imgs[b]).max()) > 0.01, (a, b)


def test_concept_separability_oracle():
    # a 2-layer classifier must separate the concepts well above chance
    handle, concepts = synth_concept_dataset(small_cfg(n_concepts=3), seed=4)
    ids, labels = [], []
    for c in concepts:
        for i in c.instance_ids + c.ref_ids + c.holdout_ids:
            ids.append(i)
            labels.append(c.concept_id)
    x = handle.subset(ids).flatten(1)
    y = torch.tensor(labels)
    perm = RngStream(5, "perm").permutation(len(ids))
    x, y = x[perm], y[perm]
    n_train = int(0.7 * len(ids))
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Linear(x.shape[1], 32), torch.nn.ReLU(), torch.nn.Linear(32, 3))
    opt = torch.optim.Adam(net.parameters(), lr=1e-2)
    for _ in range(150):
        loss = torch.nn.functional.cross_entropy(net(x[:n_train]), y[:n_train])
        opt.zero_grad(); loss.backward(); opt.step()
    with torch.no_grad():
        acc = (net(x[n_train:]).argmax(dim=1) == y[n_train:]).float().mean()
    assert float(acc) >= 0.95


def test_ingest_folder(tmp_path):
    rng = np.random.default_rng(6)
    for i in range(4):
        arr = (rng.random((40, 56, 3)) * 255).astype(np.uint8)
        Image.fromarray(arr).save(tmp_path / f"img{i}.png")
    handle = ingest_dataset(tmp_path, resize_to=24, center_crop=True)
    assert len(handle) == 4
    assert handle.images.shape == (4, 3, 24, 24)
    assert handle.ids == sorted(handle.ids)
    again = ingest_dataset(tmp_path, resize_to=24, center_crop=True)
    assert handle.manifest_hash == again.manifest_hash


def test_ingest_bad_file(tmp_path):
    (tmp_path / "broken.png").write_bytes(b"not an image")
    arr = (np.random.default_rng(7).random((32, 32, 3)) * 255).astype(np.uint8)
    Image.fromarray(arr).save(tmp_path / "ok.png")
    with pytest.raises(ValidationError):
        ingest_dataset(tmp_path, resize_to=16)
    handle = ingest_dataset(tmp_path, resize_to=16, skip_bad=True)
    assert len(handle) == 1


def test_ingest_empty(tmp_path):
    with pytest.raises(ValidationError):
        ingest_dataset(tmp_path, resize_to=16)


def test_class_names_cover_concepts():
    handle, concepts = synth_concept_dataset(small_cfg(n_concepts=5), seed=8)
    assert [c.class_name for c in concepts] == CLASS_NAMES[:5]
