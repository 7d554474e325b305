import pytest
import torch

from conceptwm.backends import OrthogonalBackend
from conceptwm.codec import new_codec
from conceptwm.config import CodecSettings
from conceptwm.diffusion import (
    ModelCheckpoint,
    NoiseSchedule,
    ToyDenoiser,
    build_embedding_table,
    instance_prompt,
    prior_prompt,
)
from conceptwm.distortions import DistortionSpec
from conceptwm.errors import ValidationError
from conceptwm.evaluation import (
    SweepReport,
    SweepRow,
    decode_stats,
    inference_ablation_sweep,
    nearest_reference_quality,
    protection_eval,
    robustness_sweep,
)
from conceptwm.message import Message
from conceptwm.rng import RngStream

SIZE = 16


@pytest.fixture(scope="module")
def rig():
    backend = OrthogonalBackend(block=2)
    table = build_embedding_table(
        ["a", "of", "photo", "circle", "sks0"], 8, RngStream(0, "emb")
    )
    torch.manual_seed(2)
    net = ToyDenoiser(latent_channels=12, channels=8, cond_dim=8)
    with torch.no_grad():
        net.conv_out.weight.normal_(0, 0.05)
    model = ModelCheckpoint(net, table, NoiseSchedule.linear(T=50))
    codec = new_codec(
        CodecSettings(message_bits=8, msg_channels=2, hidden_channels=4),
        backend.latent_shape(SIZE), RngStream(1, "codec"),
    )
    msg = Message.random(8, RngStream(2, "m"))
    return backend, model, codec, msg


def test_sweep_report_validation():
    with pytest.raises(ValidationError):
        SweepReport(rows=[SweepRow("A", 0.5, 0.5, 4), SweepRow("A", 0.6, 0.5, 4)])
    with pytest.raises(ValidationError):
        SweepReport(rows=[SweepRow("A", 0.5, 0.5, 0)])


def test_decode_stats_bounds(rig):
    backend, model, codec, msg = rig
    imgs = RngStream(3, "i").rand(10, 3, SIZE, SIZE)
    acc, tpr = decode_stats(codec, imgs, msg, fpr=0.01)
    assert 0.0 <= acc <= 1.0
    assert 0.0 <= tpr <= 1.0


def test_robustness_sweep_structure_and_reproducibility(rig):
    backend, model, codec, msg = rig
    suite = [DistortionSpec("identity"), DistortionSpec("gaussian_noise", {"std": 0.05})]
    prompt = instance_prompt("sks0", "circle")
    a = robustness_sweep(model, backend, codec, msg, prompt, suite, 6, 0.01,
                         RngStream(4, "s"), steps=4, size=SIZE)
    b = robustness_sweep(model, backend, codec, msg, prompt, suite, 6, 0.01,
                         RngStream(4, "s"), steps=4, size=SIZE)
    assert [r.label for r in a.rows] == ["Clean", "Identity", "Noise", "Average"]
    assert [(r.bit_accuracy, r.tpr) for r in a.rows] == [(r.bit_accuracy, r.tpr) for r in b.rows]
    # identity attack row equals the clean row exactly (same images)
    assert a.row("Identity").bit_accuracy == a.row("Clean").bit_accuracy
    avg = (a.row("Identity").bit_accuracy + a.row("Noise").bit_accuracy) / 2
    assert a.row("Average").bit_accuracy == pytest.approx(avg)


def test_ablation_sweep_rows(rig):
    backend, model, codec, msg = rig
    prompt = instance_prompt("sks0", "circle")
    report = inference_ablation_sweep(
        model, backend, backend, codec, msg, prompt, 4, 0.01, RngStream(5, "a"),
        steps_axis=(2, 3), sampler_axis=("ddim",), guidance_axis=(1.0,),
        size_axis=(SIZE,), default_steps=3, default_sampler="ddim",
        default_guidance=1.0, default_size=SIZE,
    )
    labels = [r.label for r in report.rows]
    assert labels == [
        "Steps=2", "Steps=3", "Sampler=ddim", "Guidance=1", f"Size={SIZE}",
        "Backend=native", "Backend=mismatched",
    ]
    # same backend on both slots: the swap rows coincide
    native = report.row("Backend=native")
    swapped = report.row("Backend=mismatched")
    assert native.bit_accuracy == swapped.bit_accuracy


def test_nearest_reference_quality_picks_best():
    g = torch.Generator().manual_seed(11)
    refs = torch.rand(2, 3, 8, 8, generator=g)
    gens = (refs + 0.01 * torch.randn(2, 3, 8, 8, generator=g)).clamp(0, 1)
    p, s = nearest_reference_quality(gens.flip(0), refs)
    # each generation should match its close reference, not the far one
    assert p > 30.0
    assert s > 0.95


def test_protection_eval_paired_contract(rig):
    backend, model, codec, msg = rig
    imgs = RngStream(6, "p").rand(3, 3, SIZE, SIZE)
    holdout = RngStream(7, "h").rand(2, 3, SIZE, SIZE)
    prompts = (instance_prompt("sks0", "circle"), prior_prompt("circle"))
    report = protection_eval(
        imgs, imgs.clone(), model, backend, prompts, holdout, RngStream(8, "e"),
        ft_steps=2, ft_lr=1e-3, lambda_prior=0.0, n_generations=2,
        probe_draws=2, sample_steps=2,
    )
    # identical inputs + shared streams: the pairing must be exact
    assert report["loss_ratio"] == 1.0
    assert report["psnr_drop_db"] == 0.0
    assert report["heldout_loss_protected"] == report["heldout_loss_clean"]


def test_protection_eval_shape_mismatch(rig):
    backend, model, codec, msg = rig
    imgs = RngStream(9, "p").rand(3, 3, SIZE, SIZE)
    prompts = (instance_prompt("sks0", "circle"), prior_prompt("circle"))
    with pytest.raises(ValidationError):
        protection_eval(imgs, imgs[:2], model, backend, prompts, imgs[:1],
                        RngStream(10, "e"), ft_steps=1, lambda_prior=0.0,
                        n_generations=1, probe_draws=1, sample_steps=2)
