import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from support import grad_rel_err

from conceptwm.backends import OrthogonalBackend
from conceptwm.codec import (
    CodecCheckpoint,
    codec_total_loss,
    embed_watermark,
    extract_logits,
    message_loss,
    message_loss_of,
    new_codec,
    perceptual_loss,
    ppd_loss,
    pretrain_codec,
)
from conceptwm.config import CodecSettings
from conceptwm.distortions import standard_suite
from conceptwm.errors import ConfigError, DimensionError, PayloadError, ValidationError
from conceptwm.message import Message
from conceptwm.rng import RngStream


def micro_settings(**kw) -> CodecSettings:
    base = dict(
        message_bits=4, msg_channels=2, hidden_channels=4,
        train_steps=0, batch_size=4, learning_rate=2e-3,
        lambda_pips=1.0, mu_ppd=0.25, ppd_top_fraction=0.25,
    )
    base.update(kw)
    return CodecSettings(**base)


# ---------------------------------------------------------------------------
# losses


def test_message_loss_all_zero_logits():
    for bits in [(1, 0, 1, 1), (0, 0, 0, 0), (1, 1, 1, 1)]:
        m = Message(bits)
        loss = message_loss_of(m, torch.zeros(4))
        assert float(loss) == pytest.approx(4 * math.log(2), rel=1e-6)


def test_message_loss_saturated():
    m = Message((1, 0, 1, 1))
    good = torch.tensor([20.0, -20.0, 20.0, 20.0])
    assert float(message_loss_of(m, good)) < 1e-6
    bad = -good
    loss = float(message_loss_of(m, bad))
    assert math.isfinite(loss)
    assert loss == pytest.approx(4 * 20.0, rel=1e-3)


def test_message_loss_length_mismatch():
    with pytest.raises(PayloadError):
        message_loss_of(Message((1, 0)), torch.zeros(3))


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=10, deadline=None)
def test_message_loss_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    bits = torch.randint(0, 2, (3, 6), generator=g).float()
    logits = torch.randn(3, 6, generator=g) * 5
    assert float(message_loss(bits, logits)) >= 0.0


def test_perceptual_loss_properties():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 3, 16, 16, generator=g)
    assert float(perceptual_loss(x, x)) == 0.0
    shifted = (x + 0.1).clamp(0, 1)
    assert float(perceptual_loss(x, shifted)) > 0.0
    assert float(perceptual_loss(x, shifted)) == pytest.approx(
        float(perceptual_loss(shifted, x)), rel=1e-6
    )
    with pytest.raises(DimensionError):
        perceptual_loss(x, x[:, :, :8, :])


def test_ppd_identical_zero_and_full_fraction_is_mse():
    g = torch.Generator().manual_seed(1)
    a = torch.rand(2, 3, 8, 8, generator=g)
    b = (a + 0.05 * torch.randn(2, 3, 8, 8, generator=g)).clamp(0, 1)
    assert float(ppd_loss(a, a, 0.3)) == 0.0
    assert float(ppd_loss(a, b, 1.0)) == pytest.approx(float(((a - b) ** 2).mean()), rel=1e-6)


def test_ppd_single_pixel_governs():
    a = torch.zeros(1, 3, 4, 4)
    b = a.clone()
    b[0, 0, 1, 2] = 0.5
    # top fraction selects exactly that pixel; mean over channels of r^2
    assert float(ppd_loss(a, b, 1 / 16)) == pytest.approx(0.25 / 3, rel=1e-6)


def enumeration_ppd(a, b, frac):
    r = (b - a)[0]
    scores = r.abs().amax(dim=0).flatten()
    values = (r**2).mean(dim=0).flatten()
    k = math.ceil(frac * scores.numel())
    order = torch.argsort(scores, descending=True, stable=True)
    return float(values[order[:k]].mean())


@given(st.integers(min_value=0, max_value=10_000), st.sampled_from([0.1, 0.25, 0.5, 1.0]))
@settings(max_examples=20, deadline=None)
def test_ppd_matches_enumeration(seed, frac):
    g = torch.Generator().manual_seed(seed)
    a = torch.rand(1, 3, 6, 6, generator=g)
    b = torch.rand(1, 3, 6, 6, generator=g)
    assert float(ppd_loss(a, b, frac)) == pytest.approx(enumeration_ppd(a, b, frac), rel=1e-6)


def test_ppd_bad_fraction():
    a = torch.zeros(1, 3, 4, 4)
    for frac in (0.0, 1.5, -0.1):
        with pytest.raises(ConfigError):
            ppd_loss(a, a, frac)


def test_total_loss_arithmetic():
    cfg = micro_settings(lambda_pips=0.1, mu_ppd=0.2)
    assert codec_total_loss(1.0, 1.0, 1.0, cfg) == pytest.approx(1.3)
    cfg0 = micro_settings(lambda_pips=0.0, mu_ppd=0.0)
    assert codec_total_loss(2.5, 9.0, 9.0, cfg0) == 2.5


# ---------------------------------------------------------------------------
# embed / extract


def make_codec(variant="FLW", latent_shape=(12, 4, 4), seed=0, **kw):
    return new_codec(micro_settings(variant=variant, **kw), latent_shape, RngStream(seed, "codec"))


def test_identity_at_init_and_additive():
    codec = make_codec()
    g = torch.Generator().manual_seed(2)
    latent = torch.randn(3, 12, 4, 4, generator=g)
    msg = Message((1, 0, 1, 1))
    wm, sigma1 = embed_watermark(latent, msg, codec)
    assert torch.equal(wm, latent + sigma1)
    # zero-initialized final layer: identity at init
    assert float(sigma1.detach().abs().max()) == 0.0


def test_olw_residual_input_independent():
    codec = make_codec(variant="OLW")
    # give the final layer nonzero weights so residuals are nontrivial
    torch.nn.init.normal_(codec.encoder.fuse[-1].weight, std=0.1)
    g = torch.Generator().manual_seed(3)
    msg = Message((1, 1, 0, 0))
    _, s_a = embed_watermark(torch.randn(2, 12, 4, 4, generator=g), msg, codec)
    _, s_b = embed_watermark(torch.randn(2, 12, 4, 4, generator=g), msg, codec)
    assert torch.allclose(s_a, s_b)
    # and removable by subtraction
    latent = torch.randn(2, 12, 4, 4, generator=g)
    wm, s = embed_watermark(latent, msg, codec)
    assert torch.allclose(wm - s, latent)


def test_flw_residual_content_dependent_after_training():
    codec = make_codec(variant="FLW")
    torch.nn.init.normal_(codec.encoder.fuse[-1].weight, std=0.1)
    g = torch.Generator().manual_seed(4)
    msg = Message((1, 1, 0, 0))
    _, s_a = embed_watermark(torch.randn(1, 12, 4, 4, generator=g), msg, codec)
    _, s_b = embed_watermark(torch.randn(1, 12, 4, 4, generator=g), msg, codec)
    assert float((s_a - s_b).detach().norm()) > 0.0


def test_embed_errors():
    codec = make_codec()
    with pytest.raises(DimensionError):
        codec.embed(torch.zeros(1, 12, 8, 8), Message((1, 0, 1, 1)))
    with pytest.raises(PayloadError):
        codec.embed(torch.zeros(1, 12, 4, 4), Message((1, 0)))


def test_extract_deterministic_and_validates():
    codec = make_codec()
    g = torch.Generator().manual_seed(5)
    img = torch.rand(2, 3, 8, 8, generator=g)
    a = extract_logits(img, codec)
    b = extract_logits(img, codec)
    assert torch.equal(a, b)
    assert a.shape == (2, 4)
    assert torch.isfinite(a).all()
    bad = img.clone()
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValidationError):
        extract_logits(bad, codec)
    with pytest.raises(DimensionError):
        extract_logits(img[0], codec)


def test_untrained_decoder_near_chance():
    codec = make_codec(message_bits=8, latent_shape=(12, 4, 4))
    rng = RngStream(6, "mc")
    hits = 0
    total = 0
    for i in range(40):
        img = rng.rand(8, 3, 8, 8)
        bits = codec.extract_bits(img)
        ref = rng.randint(0, 2, (8, 8)).to(torch.uint8)
        hits += int((bits == ref).sum())
        total += bits.numel()
    acc = hits / total
    assert abs(acc - 0.5) < 0.05  # >=1000 bits of Monte Carlo


# ---------------------------------------------------------------------------
# gradient check (Eq. 2 total through encoder params)


def test_total_loss_gradcheck_encoder():
    backend = OrthogonalBackend(block=2)
    cfg = micro_settings()
    codec = make_codec(latent_shape=(12, 4, 4))
    codec.encoder.double()
    codec.decoder.double()
    torch.nn.init.normal_(codec.encoder.fuse[-1].weight, std=0.05)
    g = torch.Generator().manual_seed(7)
    x = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    bits = torch.randint(0, 2, (2, 4), generator=g)
    z = backend.encode(x)

    def loss_fn():
        z_w, _ = codec.embed(z, bits)
        x_w = backend.decode(z_w)
        logits = codec.decoder(x_w)
        return codec_total_loss(
            message_loss(bits, logits),
            perceptual_loss(x, x_w),
            ppd_loss(x, x_w, cfg.ppd_top_fraction),
            cfg,
        )

    params = [p for p in codec.encoder.parameters()]
    assert grad_rel_err(loss_fn, params) <= 1e-4


# ---------------------------------------------------------------------------
# pretraining mechanics


def small_corpus(n=24, size=16, seed=8):
    rng = RngStream(seed, "corpus")
    # piecewise-smooth toy images so the decoder has structure to key on
    base = rng.rand(n, 3, 1, 1) * 0.6 + 0.2
    img = base.expand(n, 3, size, size).clone()
    img += 0.15 * rng.randn(n, 3, size, size).cumsum(dim=-1) / size
    return img.clamp(0, 1)


def test_pretrain_zero_steps_returns_init():
    backend = OrthogonalBackend(block=4)
    cfg = micro_settings(train_steps=0)
    images = small_corpus()
    codec = pretrain_codec(images, backend, [], cfg, RngStream(9, "pre"))
    fresh = new_codec(cfg, backend.latent_shape(16), RngStream(9, "pre"))
    assert codec.param_hash() == fresh.param_hash()


def test_pretrain_same_seed_bit_identical():
    backend = OrthogonalBackend(block=4)
    cfg = micro_settings(train_steps=25, message_bits=4)
    images = small_corpus()
    suite = standard_suite("table5_pretrain")
    pool = [s for s in suite if s.kind in ("gaussian_noise", "brightness")]
    a = pretrain_codec(images, backend, pool, cfg, RngStream(10, "pre"))
    b = pretrain_codec(images, backend, pool, cfg, RngStream(10, "pre"))
    assert a.param_hash() == b.param_hash()
    c = pretrain_codec(images, backend, pool, cfg, RngStream(11, "pre"))
    assert a.param_hash() != c.param_hash()


def test_pretrain_empty_dataset():
    backend = OrthogonalBackend(block=4)
    with pytest.raises(ValidationError):
        pretrain_codec(torch.zeros(0, 3, 16, 16), backend, [], micro_settings(), RngStream(0, "x"))


def test_pretrain_learns_on_clean_channel():
    backend = OrthogonalBackend(block=4)
    cfg = micro_settings(
        train_steps=400, message_bits=4, msg_channels=4, hidden_channels=8,
        batch_size=8, learning_rate=3e-3, lambda_pips=0.3, mu_ppd=0.1,
    )
    images = small_corpus(n=32)
    codec = pretrain_codec(images, backend, [], cfg, RngStream(12, "pre"))
    curve = codec.training_metadata["curve"]
    assert curve[-1]["bit_acc"] > 0.9
    # decode a freshly watermarked batch
    rng = RngStream(13, "eval")
    msg = Message.random(4, rng)
    z = backend.encode(images[:8])
    z_w, _ = codec.embed(z, msg)
    x_w = backend.decode(z_w).clamp(0, 1)
    bits = codec.extract_bits(x_w)
    acc = float((bits == torch.tensor(msg.bits, dtype=torch.uint8)).float().mean())
    assert acc > 0.9
