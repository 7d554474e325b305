import pytest
import torch

from conceptwm.backends import OrthogonalBackend
from conceptwm.codec import new_codec
from conceptwm.config import CodecSettings, IapiConfig
from conceptwm.diffusion import (
    ModelCheckpoint,
    NoiseSchedule,
    ToyDenoiser,
    build_embedding_table,
    dreambooth_loss,
    instance_prompt,
    prior_prompt,
)
from conceptwm.errors import AttackError, ProtocolError
from conceptwm.iapi import (
    build_adversarial_watermark,
    pgd_attack,
    surrogate_finetune,
    _project,
)
from conceptwm.message import Message
from conceptwm.rng import RngStream

SIZE = 16


@pytest.fixture(scope="module")
def setup():
    backend = OrthogonalBackend(block=2)
    table = build_embedding_table(
        ["a", "of", "photo", "circle", "sks0"], 8, RngStream(0, "emb")
    )
    torch.manual_seed(0)
    net = ToyDenoiser(latent_channels=12, channels=8, cond_dim=8)
    with torch.no_grad():
        net.conv_out.weight.normal_(0, 0.05)
    base = ModelCheckpoint(net, table, NoiseSchedule.linear(T=100))
    rng = RngStream(1, "imgs")
    images = rng.rand(4, 3, SIZE, SIZE)
    codec = new_codec(
        CodecSettings(message_bits=4, msg_channels=2, hidden_channels=4),
        backend.latent_shape(SIZE),
        RngStream(2, "codec"),
    )
    with torch.no_grad():
        codec.encoder.fuse[-1].weight.normal_(0, 0.02)
    return backend, base, images, codec


def cfg(**kw) -> IapiConfig:
    base = dict(eta=4 / 255, alpha=1 / 255, pgd_steps=4, surrogate_steps=3, surrogate_lr=1e-3)
    base.update(kw)
    return IapiConfig(**base)


def test_surrogate_zero_steps_is_base(setup):
    backend, base, images, _ = setup
    prompts = (instance_prompt("sks0", "circle"), prior_prompt("circle"))
    surr = surrogate_finetune(
        base, images[:2], ["b/0", "b/1"], ["a/0", "a/1"], backend, prompts, None,
        cfg(surrogate_steps=0), RngStream(3, "s"),
    )
    assert surr.param_hash() == base.param_hash()
    assert surr.version_tag.endswith("surrogate")


def test_surrogate_rejects_pool_overlap(setup):
    backend, base, images, _ = setup
    prompts = (instance_prompt("sks0", "circle"), prior_prompt("circle"))
    with pytest.raises(ProtocolError):
        surrogate_finetune(
            base, images[:2], ["x/0", "x/1"], ["x/1", "x/2"], backend, prompts, None,
            cfg(), RngStream(3, "s"),
        )


def test_surrogate_deterministic_and_reduces_loss(setup):
    backend, base, images, _ = setup
    prompts = (instance_prompt("sks0", "circle"), prior_prompt("circle"))
    a = surrogate_finetune(
        base, images[:2], ["b/0", "b/1"], ["a/0"], backend, prompts, None,
        cfg(surrogate_steps=25), RngStream(4, "s"),
    )
    b = surrogate_finetune(
        base, images[:2], ["b/0", "b/1"], ["a/0"], backend, prompts, None,
        cfg(surrogate_steps=25), RngStream(4, "s"),
    )
    assert a.param_hash() == b.param_hash()
    assert a.param_hash() != base.param_hash()
    # paired Monte Carlo with shared noise: fine-tuned model should fit X_B better
    with torch.no_grad():
        refs = backend.encode(images[:2])
    deltas = []
    for i in range(30):
        rng_a = RngStream(100 + i, "mc")
        rng_b = RngStream(100 + i, "mc")
        l_base = float(dreambooth_loss(base, refs, None, prompts, 0.0, rng_a).detach())
        l_surr = float(dreambooth_loss(a, refs, None, prompts, 0.0, rng_b).detach())
        deltas.append(l_base - l_surr)
    assert sum(deltas) / len(deltas) > 0.0


def test_pgd_zero_steps_zero_sigma(setup):
    backend, base, images, _ = setup
    prompt = instance_prompt("sks0", "circle")
    res = pgd_attack(
        base, images[:1], torch.zeros_like(images[:1]), backend, prompt,
        cfg(pgd_steps=0), RngStream(5, "p"),
    )
    assert float(res.sigma2.abs().max()) == 0.0
    assert len(res.probe_losses) == 1


def test_pgd_budget_exact_and_deterministic(setup):
    backend, base, images, _ = setup
    prompt = instance_prompt("sks0", "circle")
    config = cfg(pgd_steps=6)
    res = pgd_attack(base, images[:2], torch.zeros_like(images[:2]), backend, prompt,
                     config, RngStream(6, "p"))
    eta32 = float(torch.tensor(config.eta, dtype=torch.float32))
    assert float(res.sigma2.abs().max()) <= eta32
    res2 = pgd_attack(base, images[:2], torch.zeros_like(images[:2]), backend, prompt,
                      config, RngStream(6, "p"))
    assert torch.equal(res.sigma2, res2.sigma2)
    # with enough steps of alpha-sized moves, some coordinate reaches the budget
    assert float(res.sigma2.abs().max()) > config.eta * 0.9


def test_pgd_probe_loss_mostly_nondecreasing(setup):
    backend, base, images, _ = setup
    prompt = instance_prompt("sks0", "circle")
    res = pgd_attack(base, images[:2], torch.zeros_like(images[:2]), backend, prompt,
                     cfg(pgd_steps=10), RngStream(7, "p"), fixed_draws=True)
    assert res.monotone_fraction() >= 0.9


def test_pgd_nonfinite_gradient_raises(setup):
    backend, base, images, _ = setup
    bad = base.clone()
    with torch.no_grad():
        bad.denoiser.conv_in.weight[0, 0, 0, 0] = float("nan")
    prompt = instance_prompt("sks0", "circle")
    with pytest.raises(AttackError):
        pgd_attack(bad, images[:1], torch.zeros_like(images[:1]), backend, prompt,
                   cfg(pgd_steps=2), RngStream(8, "p"))


def test_projection_idempotent():
    g = torch.Generator().manual_seed(9)
    anchor = torch.rand(1, 3, 8, 8, generator=g) * 0.8 + 0.1
    eta = 4 / 255
    sigma = (torch.rand(1, 3, 8, 8, generator=g) * 2 - 1) * eta
    feasible = _project(sigma, anchor, eta)
    again = _project(feasible, anchor, eta)
    assert torch.equal(feasible, again)


def test_build_adversarial_watermark_contracts(setup):
    backend, base, images, codec = setup
    prompt = instance_prompt("sks0", "circle")
    msg = Message((1, 0, 1, 1))
    config = cfg(pgd_steps=4)
    wm = build_adversarial_watermark(
        codec, backend, base, images[0], "img/0", msg, prompt, config, RngStream(10, "b"),
    )
    assert torch.equal(wm.phi, wm.sigma1 + wm.sigma2)
    eta32 = float(torch.tensor(config.eta, dtype=torch.float32))
    assert float(wm.sigma2.abs().max()) <= eta32
    assert float((wm.phi - wm.sigma1).abs().max()) <= eta32
    for key in ("bit_acc_watermark_only", "bit_acc_with_adversarial",
                "decodability_drop", "pgd_monotone_fraction"):
        assert key in wm.audit

    pure = build_adversarial_watermark(
        codec, backend, base, images[0], "img/0", msg, prompt,
        cfg(pgd_steps=0), RngStream(10, "b"),
    )
    assert float(pure.sigma2.abs().max()) == 0.0
    assert torch.equal(pure.phi, pure.sigma1)
