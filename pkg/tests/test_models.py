import math

import numpy as np
import pytest
import torch

from capgan.errors import ShapeError, TransferError
from capgan.models import (CVAE, ModelConfig, WeightArchive, build_cvae, build_gan, decode,
                           discriminate, embed_and_combine, encode, generate, reparameterize,
                           sample_noise, transfer_weights)

CFG = ModelConfig(image_shape=(8, 8, 1), num_classes=3, latent_dim=4, channels=(2, 3),
                  label_dim=2, head_hidden=5)


def rand_x(n, cfg=CFG, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((n, *cfg.image_shape), generator=g)


def test_config_divisibility():
    with pytest.raises(ShapeError):
        ModelConfig(image_shape=(30, 30, 1), channels=(4, 4, 4))
    assert ModelConfig().bottleneck == (128, 4, 4)


def test_config_roundtrip():
    assert ModelConfig.from_dict(CFG.to_dict()) == CFG


# -- encode -----------------------------------------------------------------------

def test_encode_shapes_and_identical_rows():
    m = build_cvae(CFG, seed=1)
    x = rand_x(3)
    x[2] = x[0]
    mu, logvar = encode(m.encoder, x)
    assert mu.shape == logvar.shape == (3, 4)
    assert torch.isfinite(mu).all() and torch.isfinite(logvar).all()
    assert torch.equal(mu[0], mu[2]) and torch.equal(logvar[0], logvar[2])


def test_encode_zero_network():
    m = build_cvae(CFG, seed=1)
    with torch.no_grad():
        for p in m.encoder.parameters():
            p.zero_()
    mu, logvar = encode(m.encoder, rand_x(2))
    assert torch.all(mu == 0) and torch.all(logvar == 0)


def test_encode_shape_error():
    m = build_cvae(CFG, seed=1)
    with pytest.raises(ShapeError):
        encode(m.encoder, torch.zeros(2, 4, 4, 1))


# -- reparameterize ----------------------------------------------------------------

@pytest.mark.parametrize("mu,logvar,noise,z", [
    (0.0, 0.0, 0.0, 0.0),
    (1.0, 0.0, 1.0, 2.0),
    (0.0, 2 * math.log(2), 1.0, 2.0),
])
def test_reparameterize_examples(mu, logvar, noise, z):
    t = lambda v: torch.tensor([v], dtype=torch.float64)
    assert reparameterize(t(mu), t(logvar), t(noise)).item() == pytest.approx(z, rel=1e-12)


def test_reparameterize_identity_random():
    rng = np.random.default_rng(0)
    mu, lv, nz = (rng.normal(size=(50, 7)) for _ in range(3))
    z = reparameterize(*(torch.from_numpy(a) for a in (mu, lv, nz))).numpy()
    np.testing.assert_allclose(z, mu + np.exp(0.5 * lv) * nz, rtol=1e-14, atol=0)


def test_reparameterize_shape_mismatch():
    with pytest.raises(ShapeError):
        reparameterize(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(3, 2))


# -- embed / decode / generate ------------------------------------------------------

def _set_embedding(emb, rows):
    with torch.no_grad():
        emb.table.weight.copy_(torch.tensor(rows, dtype=emb.table.weight.dtype))


def test_embed_examples():
    cfg = ModelConfig(image_shape=(4, 4, 1), num_classes=3, latent_dim=2, channels=(2,))
    m = build_cvae(cfg, 0)
    _set_embedding(m.embedder, [[1, 1], [0, 0], [0.5, 2]])
    z = torch.tensor([[2.0, 3.0]] * 3)
    o = embed_and_combine(m.embedder, z, [0, 1, 2])
    assert o.tolist() == [[2, 3], [0, 0], [1, 6]]


def test_embed_label_out_of_range():
    m = build_cvae(CFG, 0)
    with pytest.raises(ValueError):
        embed_and_combine(m.embedder, torch.zeros(1, 4), [3])


def test_decode_zero_preactivation_is_half():
    m = build_cvae(CFG, 0)
    with torch.no_grad():
        for p in m.decoder.deconv[-1].parameters():
            p.zero_()
    out = decode(m.decoder, torch.randn(2, 4))
    assert out.shape == (2, 8, 8, 1) and torch.all(out == 0.5)


def test_decode_range_and_determinism():
    m = build_cvae(CFG, 0)
    o = 50 * torch.randn(4, 4)
    o[3] = o[1]
    out = decode(m.decoder, o)
    assert out.min() >= 0 and out.max() <= 1
    assert torch.equal(out[1], out[3])


def test_decode_shape_error():
    m = build_cvae(CFG, 0)
    with pytest.raises(ShapeError):
        decode(m.decoder, torch.zeros(2, 5))


def test_generate_composition():
    gen, _ = build_gan(CFG, 3)
    z, y = torch.randn(5, 4), torch.tensor([0, 1, 2, 1, 0])
    expected = gen.decoder(embed_and_combine(gen.embedder, z, y))
    assert torch.equal(generate(gen, z, y), expected)


# -- discriminate --------------------------------------------------------------------

def test_disc_zero_head():
    _, disc = build_gan(CFG, 0)
    with torch.no_grad():
        for p in disc.head[-1].parameters():
            p.zero_()
    logits = discriminate(disc, rand_x(3), [0, 1, 2])
    assert logits.shape == (3,) and torch.all(logits == 0)


def test_disc_same_pair_equal_and_label_sensitive():
    _, disc = build_gan(CFG, 0)
    x = rand_x(1).repeat(4, 1, 1, 1)
    logits = discriminate(disc, x, [1, 1, 0, 2])
    assert logits[0] == logits[1]
    assert logits[0] != logits[2] and logits[0] != logits[3]


def test_disc_label_interacts_with_image():
    # the label must change how the image is scored, not only add a per-class offset
    _, disc = build_gan(CFG, 0)
    x = rand_x(2)
    a = discriminate(disc, x, [0, 0])
    b = discriminate(disc, x, [1, 1])
    assert not torch.allclose(a - b, (a - b)[0].expand(2), atol=1e-7)


# -- noise ---------------------------------------------------------------------------

def test_noise_seeded():
    assert torch.equal(sample_noise((3, 2), 5), sample_noise((3, 2), 5))
    u = sample_noise((1000,), 1, kind="uniform")
    assert u.min() >= 0 and u.max() < 1
    with pytest.raises(ValueError):
        sample_noise((2,), 0, kind="laplace")


def test_no_hidden_randomness():
    m = build_cvae(CFG, 0)
    x, y, nz = rand_x(2), torch.tensor([0, 1]), torch.randn(2, 4)
    a, _ = m(x, y, nz)
    torch.manual_seed(123)
    b, _ = m(x, y, nz)
    assert torch.equal(a, b)


def test_build_seeded():
    a, b = build_cvae(CFG, 7), build_cvae(CFG, 7)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


# -- archives and transfer -----------------------------------------------------------

def test_archive_roundtrip_bit_exact(tmp_path):
    arch = WeightArchive.from_module(build_cvae(CFG, 2), seed=2)
    arch.save(tmp_path / "w.npz")
    back = WeightArchive.load(tmp_path / "w.npz")
    assert list(back.arrays) == list(arch.arrays)
    for k in arch.arrays:
        assert back.arrays[k].dtype == arch.arrays[k].dtype
        assert back.arrays[k].tobytes() == arch.arrays[k].tobytes()
    assert back.metadata == arch.metadata and back.model_config == CFG


def test_archive_naming_scheme():
    names = list(WeightArchive.from_module(build_cvae(CFG, 0)).arrays)
    assert all(n.split(".")[0] in ("encoder", "embedder", "decoder") for n in names)
    assert any(n.startswith("encoder.trunk.") for n in names)


def test_transfer_equivalence():
    cvae = build_cvae(CFG, 4)
    gen, disc = transfer_weights(WeightArchive.from_module(cvae), seed=9)
    z = torch.randn(100, 4)
    y = torch.randint(0, 3, (100,))
    ref = cvae.decoder(embed_and_combine(cvae.embedder, z, y))
    assert torch.max(torch.abs(generate(gen, z, y) - ref)).item() == 0.0
    x = rand_x(10)
    assert torch.equal(disc.trunk(x), cvae.encoder.trunk(x))


def test_transfer_byte_equal_weights():
    cvae = build_cvae(CFG, 4).double()
    arch = WeightArchive.from_module(cvae)
    gen, disc = transfer_weights(arch, seed=1)
    for k, v in gen.state_dict().items():
        assert v.numpy().tobytes() == arch.arrays[k].tobytes()
    for k, v in disc.state_dict().items():
        if k.startswith("trunk."):
            assert v.numpy().tobytes() == arch.arrays["encoder." + k].tobytes()


def test_transfer_seeds_heads_only():
    arch = WeightArchive.from_module(build_cvae(CFG, 4))
    _, d1 = transfer_weights(arch, seed=1)
    _, d1b = transfer_weights(arch, seed=1)
    _, d2 = transfer_weights(arch, seed=2)
    s1, s1b, s2 = d1.state_dict(), d1b.state_dict(), d2.state_dict()
    for k in s1:
        assert torch.equal(s1[k], s1b[k])
        if k.startswith("trunk."):
            assert torch.equal(s1[k], s2[k])
        else:
            assert not torch.equal(s1[k], s2[k])


def test_transfer_topology_mismatch_names_layer():
    arch = WeightArchive.from_module(build_cvae(CFG, 0))
    wider = ModelConfig(image_shape=(8, 8, 1), num_classes=3, latent_dim=4, channels=(2, 5),
                        label_dim=2, head_hidden=5)
    with pytest.raises(TransferError, match="encoder.trunk.layers.2.weight"):
        transfer_weights(arch, seed=0, config=wider)
    transfer_weights(arch, seed=0, config=CFG)  # matching topology passes


def test_transfer_missing_layer():
    arch = WeightArchive.from_module(build_cvae(CFG, 0))
    del arch.arrays["decoder.dense.weight"]
    with pytest.raises(TransferError, match="decoder.dense.weight"):
        transfer_weights(arch, seed=0)
