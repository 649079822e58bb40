"""Codebook stream: quantization oracle, lookup, training mechanics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualstream import autodiff as ad
from dualstream.errors import CorruptStreamError, DimensionError
from dualstream.model import CodecModel
from dualstream.vq import dequantize, quantize_to_indices
from oracles import nearest_codeword_loop, tiny_config


@pytest.fixture(scope="module")
def model():
    return CodecModel(tiny_config())


def make_codebook(entries):
    g = ad.Graph()

    class _CB:
        pass

    cb = _CB()
    cb.entries = g.parameter("cb", np.asarray(entries, dtype=np.float64))
    cb.n_z = cb.entries.data.shape[0]
    cb.dim = cb.entries.data.shape[1]
    cb.data = cb.entries.data
    return cb


def test_quantize_picks_nearest():
    cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
    latent = np.array([0.9, 1.2]).reshape(2, 1, 1)
    assert quantize_to_indices(latent, cb)[0, 0] == 1  # distances 2.25 vs 0.05


def test_quantize_exact_codeword_hits_its_index():
    rng = np.random.default_rng(0)
    entries = rng.normal(size=(16, 4))
    cb = make_codebook(entries)
    latent = entries[11].reshape(4, 1, 1)
    assert quantize_to_indices(latent, cb)[0, 0] == 11


def test_quantize_tie_breaks_to_lowest_index():
    cb = make_codebook([[1.0, 0.0], [0.5, 0.5], [1.0, 0.0]])  # rows 0 and 2 identical
    latent = np.array([1.0, 0.05]).reshape(2, 1, 1)
    assert quantize_to_indices(latent, cb)[0, 0] == 0


def test_quantize_matches_exhaustive_oracle():
    rng = np.random.default_rng(7)
    for trial in range(3):
        entries = rng.normal(size=(64, 6))
        cb = make_codebook(entries)
        latent = rng.normal(size=(6, 10, 10))
        got = quantize_to_indices(latent, cb)
        want = nearest_codeword_loop(latent.reshape(6, -1).T, entries).reshape(10, 10)
        np.testing.assert_array_equal(got, want)


@given(st.integers(0, 2 ** 31))
@settings(max_examples=25, deadline=None)
def test_quantize_dequantize_idempotent(seed):
    rng = np.random.default_rng(seed)
    entries = rng.normal(size=(12, 3))
    cb = make_codebook(entries)
    latent = rng.normal(size=(3, 5, 5))
    d1 = quantize_to_indices(latent, cb)
    d2 = quantize_to_indices(dequantize(d1, cb), cb)
    np.testing.assert_array_equal(d1, d2)


def test_dequantize_constant_map():
    rng = np.random.default_rng(1)
    entries = rng.normal(size=(8, 4))
    cb = make_codebook(entries)
    lat = dequantize(np.full((3, 3), 5), cb)
    np.testing.assert_array_equal(lat, np.broadcast_to(entries[5][:, None, None], (4, 3, 3)))


def test_dequantize_matches_lookup_loop():
    rng = np.random.default_rng(2)
    entries = rng.normal(size=(10, 4))
    cb = make_codebook(entries)
    idx = rng.integers(0, 10, size=(6, 7))
    lat = dequantize(idx, cb)
    for i in range(6):
        for j in range(7):
            np.testing.assert_array_equal(lat[:, i, j], entries[idx[i, j]])


def test_dequantize_rejects_out_of_range():
    cb = make_codebook(np.zeros((4, 2)))
    with pytest.raises(CorruptStreamError):
        dequantize(np.array([[0, 4]]), cb)


# ---------------------------------------------------------------------------
# encoder / decoder contracts
# ---------------------------------------------------------------------------

def test_vq_encode_shape_and_determinism(model):
    rng = np.random.default_rng(3)
    img = rng.uniform(-1, 1, size=(3, 256, 256))
    lat = model.vq.vq_encode(img)
    assert lat.shape == (model.cfg.codeword_dim, 16, 16)
    lat2 = model.vq.vq_encode(img.copy())
    assert lat.tobytes() == lat2.tobytes()


def test_vq_encode_rejects_wrong_tile(model):
    with pytest.raises(DimensionError):
        model.vq.vq_encode(np.zeros((3, 128, 128)))


def test_vq_encode_zero_image_finite(model):
    # also with a zeroed bias-free head: output must stay finite
    lat = model.vq.vq_encode(np.zeros((3, 256, 256)))
    assert np.all(np.isfinite(lat))
    saved_w = model.vq.encoder.head.w.data.copy()
    saved_b = model.vq.encoder.head.b.data.copy()
    model.vq.encoder.head.w.data = np.zeros_like(saved_w)
    model.vq.encoder.head.b.data = np.zeros_like(saved_b)
    lat = model.vq.vq_encode(np.zeros((3, 256, 256)))
    assert np.all(lat == 0.0)
    model.vq.encoder.head.w.data = saved_w
    model.vq.encoder.head.b.data = saved_b


def test_vq_decode_shape_and_stage_features(model):
    rng = np.random.default_rng(4)
    lat = rng.normal(size=(model.cfg.codeword_dim, 16, 16))
    img, feats = model.vq.vq_decode(lat)
    assert img.shape == (3, 256, 256)
    assert np.all((img >= -1.0) & (img <= 1.0))  # tanh head
    assert [f.shape[1] for f in feats] == [32, 64, 128, 256]
    assert len(feats) == 4
    img2, _ = model.vq.vq_decode(lat.copy())
    assert img.tobytes() == img2.tobytes()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_straight_through_gradient_is_identity():
    rng = np.random.default_rng(5)
    entries = rng.normal(size=(6, 3))
    g = ad.Graph()
    cb = g.parameter("cb", entries)
    y = ad.Tensor(rng.normal(size=(10, 3)), requires_grad=True)
    idx = nearest_codeword_loop(y.data, entries)
    yq = ad.straight_through(y, ad.gather_rows(cb, idx))
    ad.backward(ad.sum_all(yq))
    np.testing.assert_array_equal(y.grad, np.ones((10, 3)))


def test_train_step_zero_loss_terms_when_codebook_matches():
    cfg = tiny_config(n_z=4, tile=256)
    m = CodecModel(cfg)
    img = np.random.default_rng(6).uniform(-0.5, 0.5, size=(1, 3, 32, 32))
    lat = m.vq.encoder.forward(ad.Tensor(img)).data[0]  # (c, 2, 2)
    vecs = lat.reshape(cfg.codeword_dim, -1).T
    m.vq.codebook.entries.data = vecs.copy()  # codebook == encoder outputs exactly
    opt = ad.Adam(m.graph, lr=0.0, select=lambda n: n.startswith("vq."))
    rep = m.vq.train_step(img, opt, m.rng, 0)
    assert rep["codebook"] == 0.0
    assert rep["commit"] == 0.0
    assert rep["l1"] > 0.0


def test_training_reduces_reconstruction_loss():
    cfg = tiny_config(n_z=16, codeword_dim=8, vq_steps=0, seed=9)
    m = CodecModel(cfg)
    rng = np.random.default_rng(11)
    # simple smooth batch: constant and gradient patches
    ramp = np.linspace(-0.5, 0.5, 64)
    tiles = [np.broadcast_to(ramp, (3, 64, 64)).copy(),
             np.full((3, 64, 64), 0.3),
             np.broadcast_to(ramp[:, None], (3, 64, 64)).copy(),
             rng.uniform(-0.2, 0.2, size=(3, 64, 64))]
    batch = np.stack(tiles)
    m.graph.set_trainable(lambda n: n.startswith("vq."))
    opt = ad.Adam(m.graph, lr=2e-3, select=lambda n: n.startswith("vq."))
    first = m.vq.train_step(batch, opt, m.rng, 0)["l1"]
    for step in range(1, 120):
        rep = m.vq.train_step(batch, opt, m.rng, step)
    assert rep["l1"] < 0.6 * first
    assert np.all(np.isfinite(m.vq.codebook.data))


def test_dead_codeword_reseed():
    cfg = tiny_config(n_z=4, dead_code_steps=3)
    m = CodecModel(cfg)
    stale = m.vq.codebook.data[2].copy()
    latents = np.random.default_rng(8).normal(size=(5, cfg.codeword_dim))
    for _ in range(3):
        m.vq._refresh_codebook(np.array([0, 1, 3]), latents, m.rng)
    assert any(np.array_equal(m.vq.codebook.data[2], latents[r]) for r in range(5))
    assert not np.array_equal(m.vq.codebook.data[2], stale)
    assert m.vq._unused_steps[2] == 0


def test_raw_index_payload_arithmetic():
    # one 256^2 tile at n_z=1024: 256 tokens x 10 bits raw; 64 x 10 under 1_4
    assert 256 * 10 == 2560 and 2560 / 65536 == 0.0390625
    assert 64 * 10 == 640 and 640 / 65536 == 0.009765625
