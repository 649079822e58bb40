"""Token predictor: guidance construction, pass-through, loss semantics."""

import logging

import numpy as np
import pytest

from dualstream import autodiff as ad
from dualstream.errors import ConfigurationError, DimensionError
from dualstream.masking import GRID, MaskSchedule, apply_mask
from dualstream.model import CodecModel
from oracles import tiny_config


@pytest.fixture(scope="module")
def model():
    m = CodecModel(tiny_config(seed=21))
    m.predictor.trained = True
    return m


def random_tokens(seed, n_z=8):
    return np.random.default_rng(seed).integers(0, n_z, size=(GRID, GRID))


def random_latent(seed, f=2, g=8):
    return np.random.default_rng(seed).normal(size=(f, g, g))


# ---------------------------------------------------------------------------
# guidance
# ---------------------------------------------------------------------------

def test_guidance_shape(model):
    g = model.predictor.build_guidance(random_latent(0))
    assert g.data.shape == (256, model.cfg.pred_width)


def test_zero_latent_guidance_is_positional_only(model):
    g = model.predictor.build_guidance(np.zeros((2, 8, 8)))
    pos = model.predictor.guide_pos.at(np.arange(256)).data
    np.testing.assert_array_equal(g.data, pos)  # projection bias is zero


def test_guidance_nearest_resize_repeats_2x2_blocks(model):
    lat = random_latent(3)
    g = model.predictor.build_guidance(lat).data
    pos = model.predictor.guide_pos.at(np.arange(256)).data
    projected = (g - pos).reshape(GRID, GRID, -1)
    for i in range(GRID):
        for j in range(GRID):
            np.testing.assert_allclose(projected[i, j], projected[(i // 2) * 2, (j // 2) * 2],
                                       atol=1e-12, rtol=0)


def test_guidance_rejects_wrong_channels(model):
    with pytest.raises(DimensionError):
        model.predictor.build_guidance(np.zeros((5, 8, 8)))


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def test_none_schedule_is_identity_and_skips_prediction(model):
    tokens = random_tokens(1)
    masked = apply_mask(tokens, MaskSchedule.NONE)
    calls = model.predictor.predict_calls
    out = model.predictor.predict_full_map(masked, None)
    np.testing.assert_array_equal(out, tokens)
    assert model.predictor.predict_calls == calls


def test_kept_positions_pass_through_on_all_schedules(model):
    tokens = random_tokens(2)
    guidance = model.predictor.build_guidance(random_latent(2))
    for sched in MaskSchedule:
        masked = apply_mask(tokens, sched)
        out = model.predictor.predict_full_map(masked, guidance)
        for (i, j), v in masked.kept:
            assert out[i, j] == v
        assert out.min() >= 0 and out.max() < model.cfg.n_z


def test_prediction_is_deterministic_and_consumes_no_randomness(model):
    tokens = random_tokens(4)
    guidance = model.predictor.build_guidance(random_latent(4))
    masked = apply_mask(tokens, MaskSchedule.M1_9)
    draws = model.rng.draws
    a = model.predictor.predict_full_map(masked, guidance)
    b = model.predictor.predict_full_map(masked, guidance)
    np.testing.assert_array_equal(a, b)
    assert model.rng.draws == draws


def test_untrained_predictor_refuses():
    m = CodecModel(tiny_config(seed=22))
    masked = apply_mask(random_tokens(5), MaskSchedule.M1_4)
    with pytest.raises(ConfigurationError):
        m.predictor.predict_full_map(masked, None)


def test_full_schedule_predicts_from_guidance_alone(model):
    masked = apply_mask(random_tokens(6), MaskSchedule.FULL)
    out = model.predictor.predict_full_map(masked, model.predictor.build_guidance(random_latent(6)))
    assert out.shape == (GRID, GRID)
    assert out.min() >= 0 and out.max() < model.cfg.n_z


# ---------------------------------------------------------------------------
# loss semantics
# ---------------------------------------------------------------------------

def test_uniform_logits_loss_is_log_vocab():
    cfg = tiny_config(n_z=4, seed=23)
    m = CodecModel(cfg)
    for name, p in m.graph.params.items():
        if name.startswith("pred."):
            p.data = np.zeros_like(p.data)  # every logit becomes exactly 0
    tokens = random_tokens(7, n_z=4)
    masked = apply_mask(tokens, MaskSchedule.M1_16)
    loss, _ = m.predictor.masked_ce(tokens, masked, m.predictor.build_guidance(np.zeros((2, 8, 8))))
    assert abs(loss.item() - np.log(4.0)) < 1e-6


def test_saturated_logit_margin_drives_loss_to_zero():
    logits = np.zeros((1, 4))
    logits[0, 3] = 20.0  # margin 20 over every other class
    loss = ad.cross_entropy_from_logits(ad.Tensor(logits), np.array([3]))
    assert loss.item() < 1e-8


def test_kept_position_logit_gradient_is_exactly_zero(model):
    tokens = random_tokens(8)
    masked = apply_mask(tokens, MaskSchedule.M1_2)
    guidance = model.predictor.build_guidance(random_latent(8))
    loss, logits = model.predictor.masked_ce(tokens, masked, guidance)
    ad.backward(loss)
    kept_rows = np.flatnonzero(~masked.mask.reshape(-1))
    masked_rows = np.flatnonzero(masked.mask.reshape(-1))
    assert np.all(logits.grad[kept_rows] == 0.0)
    assert np.any(logits.grad[masked_rows] != 0.0)


def test_train_step_skips_when_nothing_masked(model, caplog):
    opt = ad.Adam(model.graph, lr=0.0, select=lambda n: n.startswith("pred."))
    tokens = random_tokens(9)

    class _NoMaskRng:
        def integers(self, lo, hi):
            return 0

    import dualstream.predictor as predictor_mod

    saved = predictor_mod._mask_tokens
    predictor_mod._mask_tokens = lambda t, s: apply_mask(t, MaskSchedule.NONE)
    try:
        with caplog.at_level(logging.WARNING):
            rep = model.predictor.train_step([(tokens, random_latent(9))], opt, _NoMaskRng(), 0)
    finally:
        predictor_mod._mask_tokens = saved
    assert rep["ce"] == 0.0
    assert any("masked nothing" in r.message for r in caplog.records)


def test_train_step_learns_constant_token_map():
    cfg = tiny_config(seed=24)
    m = CodecModel(cfg)
    m.graph.set_trainable(lambda n: n.startswith("pred."))
    opt = ad.Adam(m.graph, lr=3e-3, select=lambda n: n.startswith("pred."))
    tokens = np.full((GRID, GRID), 5)
    lat = np.zeros((cfg.cont_channels, 8, 8))
    samples = [(tokens, lat)]
    first = m.predictor.train_step(samples, opt, m.rng, 0)["ce"]
    for step in range(1, 60):
        rep = m.predictor.train_step(samples, opt, m.rng, step)
    assert rep["ce"] < 0.2 * first
    m.predictor.trained = True
    acc = m.predictor.masked_accuracy(tokens, MaskSchedule.M1_4, lat)
    assert acc == 1.0
