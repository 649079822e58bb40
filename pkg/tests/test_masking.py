"""Mask schedules, complexity metrics, and threshold routing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualstream import masking as mk
from dualstream.errors import ConfigurationError, DimensionError


EXPECTED_KEPT = {
    mk.MaskSchedule.NONE: 256,
    mk.MaskSchedule.M1_2: 128,
    mk.MaskSchedule.M1_4: 64,
    mk.MaskSchedule.M1_9: 25,
    mk.MaskSchedule.M1_16: 16,
    mk.MaskSchedule.FULL: 0,
}


def reference_metrics(region):
    """Independent re-implementation of the four complexity metrics."""
    rgb = np.clip((np.asarray(region, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]

    def hist_entropy(vals):
        idx = np.minimum((vals * 256).astype(np.int64), 255)
        counts = np.bincount(idx.ravel(), minlength=256)
        p = counts[counts > 0] / vals.size
        return -(p * np.log2(p)).sum()

    entropy = hist_entropy(luma)
    contrast = np.sqrt(np.mean((luma - luma.mean()) ** 2))
    color = np.mean([hist_entropy(rgb[c]) for c in range(3)])

    h, w = luma.shape
    power = np.abs(np.fft.fft2(luma)) ** 2  # unshifted on purpose
    fy = np.fft.fftfreq(h, d=1.0 / h).astype(int)
    fx = np.fft.fftfreq(w, d=1.0 / w).astype(int)
    low_y = (fy >= -h // 8) & (fy <= h // 8 - 1)
    low_x = (fx >= -w // 8) & (fx <= w // 8 - 1)
    total = power.sum()
    freq = 0.0 if total <= 0 else 1.0 - power[np.ix_(low_y, low_x)].sum() / total
    return np.array([entropy, contrast, color, freq])


def test_kept_counts_and_ratios():
    for sched, kept in EXPECTED_KEPT.items():
        assert sched.kept_count(16) == kept
    # Fig-style mask ratios on the operating grid
    assert (256 - 128) / 256 == 0.5
    assert (256 - 64) / 256 == 0.75
    assert round((256 - 25) / 256 * 100, 1) == 90.2  # 90.234375% rounds to 90.2/90.3
    assert abs((256 - 25) / 256 - 0.9023) < 5e-5
    assert (256 - 16) / 256 == 0.9375


def test_m1_9_is_stride3_offset1_lattice():
    pos = mk.MaskSchedule.M1_9.kept_positions(16)
    assert len(pos) == 25
    assert all(i % 3 == 1 and j % 3 == 1 for i, j in pos)


def test_apply_mask_m1_4_counts():
    grid = np.arange(256).reshape(16, 16)
    m = mk.apply_mask(grid, mk.MaskSchedule.M1_4)
    assert len(m.kept) == 64
    assert m.mask.sum() == 192
    # row-major keep order, values taken at the keep positions
    assert m.kept[0] == ((0, 0), 0)
    assert m.kept[1] == ((0, 2), 2)


def test_apply_mask_none_keeps_all():
    grid = np.zeros((16, 16), dtype=int)
    m = mk.apply_mask(grid, mk.MaskSchedule.NONE)
    assert len(m.kept) == 256
    assert not m.mask.any()


def test_apply_mask_rejects_wrong_grid():
    with pytest.raises(DimensionError):
        mk.apply_mask(np.zeros((8, 8), dtype=int), mk.MaskSchedule.M1_2)


def test_schedule_codes_round_trip():
    for s in mk.MaskSchedule:
        assert mk.MaskSchedule.from_code(s.code) is s
        assert mk.MaskSchedule.from_policy(s.policy_name) is s
    with pytest.raises(ValueError):
        mk.MaskSchedule.from_code(6)


@pytest.mark.parametrize("score,expected", [
    (0.10, mk.MaskSchedule.M1_9),
    (0.24, mk.MaskSchedule.M1_4),
    (0.50, mk.MaskSchedule.M1_4),
    (0.77, mk.MaskSchedule.M1_4),
    (0.90, mk.MaskSchedule.M1_2),
])
def test_threshold_routing(score, expected):
    assert mk.select_schedule(score) is expected


@given(st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=60, deadline=None)
def test_select_schedule_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert mk.select_schedule(lo).kept_count(16) <= mk.select_schedule(hi).kept_count(16)


# ---------------------------------------------------------------------------
# complexity metrics
# ---------------------------------------------------------------------------

def constant_region(value=0.2, size=64):
    return np.full((3, size, size), value)


def noise_region(rng, size=64):
    return rng.uniform(-1.0, 1.0, size=(3, size, size))


def gradient_region(size=64):
    ramp = np.linspace(-0.3, 0.3, size)
    return np.broadcast_to(ramp, (3, size, size)).copy()


def test_metrics_match_reference_implementation():
    rng = np.random.default_rng(5)
    for region in (constant_region(), noise_region(rng), gradient_region()):
        np.testing.assert_allclose(mk.region_metrics(region), reference_metrics(region),
                                   rtol=1e-10, atol=1e-10)


def test_noise_scores_above_gradient():
    rng = np.random.default_rng(11)
    regions = [constant_region(), gradient_region(), noise_region(rng)]
    stats = mk.calibrate(regions)
    s_grad = mk.complexity_score(gradient_region(), stats)
    s_noise = mk.complexity_score(noise_region(rng, 64), stats)
    assert s_noise > s_grad


def test_score_endpoints():
    rng = np.random.default_rng(3)
    const = constant_region()
    noise = noise_region(rng)
    stats = mk.calibrate([const, noise])
    assert mk.complexity_score(const, stats) == 0.0
    assert mk.complexity_score(noise, stats) == 1.0


def test_degenerate_normalization_is_half():
    region = constant_region(0.4)
    stats = mk.calibrate([region])
    np.testing.assert_array_equal(stats.mins, stats.maxs)
    assert mk.complexity_score(noise_region(np.random.default_rng(0)), stats) == 0.5
    assert mk.complexity_score(region, stats) == 0.5


def test_score_always_in_unit_interval():
    rng = np.random.default_rng(9)
    stats = mk.calibrate([constant_region(), gradient_region()])
    for _ in range(5):
        s = mk.complexity_score(noise_region(rng), stats)  # outside calibration range
        assert 0.0 <= s <= 1.0


def test_calibrate_empty_corpus_fails():
    with pytest.raises(ConfigurationError):
        mk.calibrate([])


def test_uncalibrated_score_fails():
    with pytest.raises(ConfigurationError):
        mk.complexity_score(constant_region(), None)


def test_stats_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(21)
    stats = mk.calibrate([noise_region(rng), gradient_region(), constant_region()])
    path = tmp_path / "stats.bin"
    stats.save(path)
    loaded = mk.ComplexityStats.load(path)
    assert stats.mins.tobytes() == loaded.mins.tobytes()
    assert stats.maxs.tobytes() == loaded.maxs.tobytes()
    loaded.save(tmp_path / "stats2.bin")
    assert path.read_bytes() == (tmp_path / "stats2.bin").read_bytes()
