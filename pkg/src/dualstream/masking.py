"""Structured mask schedules and complexity-aware schedule selection.

Schedules are modular lattices on the 16x16 token grid. Kept-token counts on
that grid are 256 / 128 / 64 / 25 / 16 / 0, i.e. mask ratios 0%, 50%, 75%,
90.23%, 93.75% and 100%. The complexity score is the mean of four min-max
normalized metrics (grayscale entropy, RMS contrast, per-channel histogram
entropy, high-frequency Fourier energy fraction), calibrated over a corpus.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, CorruptStreamError, DimensionError

GRID = 16

# routing thresholds for complexity-aware masking: easy < 0.24 <= medium <= 0.77 < tough
THRESHOLD_EASY = 0.24
THRESHOLD_TOUGH = 0.77

STATS_MAGIC = b"DSCS"
STATS_VERSION = 1

METRIC_NAMES = ("entropy", "contrast", "color_diversity", "spatial_frequency")


class MaskSchedule(enum.Enum):
    NONE = 0
    M1_2 = 1
    M1_4 = 2
    M1_9 = 3
    M1_16 = 4
    FULL = 5

    @property
    def code(self) -> int:
        return self.value

    @classmethod
    def from_code(cls, code: int) -> "MaskSchedule":
        try:
            return cls(code)
        except ValueError:
            raise ValueError(f"unknown schedule code {code}") from None

    @classmethod
    def from_policy(cls, name: str) -> "MaskSchedule":
        table = {"none": cls.NONE, "1_2": cls.M1_2, "1_4": cls.M1_4,
                 "1_9": cls.M1_9, "1_16": cls.M1_16, "full": cls.FULL}
        if name not in table:
            raise ConfigurationError(f"unknown mask policy {name!r}")
        return table[name]

    @property
    def policy_name(self) -> str:
        return {MaskSchedule.NONE: "none", MaskSchedule.M1_2: "1_2", MaskSchedule.M1_4: "1_4",
                MaskSchedule.M1_9: "1_9", MaskSchedule.M1_16: "1_16", MaskSchedule.FULL: "full"}[self]

    def keeps(self, i: int, j: int) -> bool:
        if self is MaskSchedule.NONE:
            return True
        if self is MaskSchedule.M1_2:
            return (i + j) % 2 == 0
        if self is MaskSchedule.M1_4:
            return i % 2 == 0 and j % 2 == 0
        if self is MaskSchedule.M1_9:
            return i % 3 == 1 and j % 3 == 1
        if self is MaskSchedule.M1_16:
            return i % 4 == 1 and j % 4 == 1
        return False

    def keep_mask(self, grid: int = GRID) -> np.ndarray:
        ii, jj = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
        if self is MaskSchedule.NONE:
            return np.ones((grid, grid), dtype=bool)
        if self is MaskSchedule.M1_2:
            return (ii + jj) % 2 == 0
        if self is MaskSchedule.M1_4:
            return (ii % 2 == 0) & (jj % 2 == 0)
        if self is MaskSchedule.M1_9:
            return (ii % 3 == 1) & (jj % 3 == 1)
        if self is MaskSchedule.M1_16:
            return (ii % 4 == 1) & (jj % 4 == 1)
        return np.zeros((grid, grid), dtype=bool)

    def kept_count(self, grid: int = GRID) -> int:
        return int(self.keep_mask(grid).sum())

    def kept_positions(self, grid: int = GRID):
        """Row-major (i, j) keep positions."""
        keep = self.keep_mask(grid)
        return [(i, j) for i in range(grid) for j in range(grid) if keep[i, j]]


@dataclass
class MaskedIndexMap:
    """Kept (position, index) pairs plus the boolean mask (True = masked)."""

    kept: list
    mask: np.ndarray
    schedule: MaskSchedule

    def __post_init__(self):
        expect = self.schedule.kept_count(self.mask.shape[0])
        if len(self.kept) != expect:
            raise DimensionError(
                f"{self.schedule.name} keeps {expect} tokens, got {len(self.kept)}")


def apply_mask(indices: np.ndarray, schedule: MaskSchedule) -> MaskedIndexMap:
    """Drop masked positions of a (16,16) index grid, row-major keep order."""
    indices = np.asarray(indices)
    if indices.shape != (GRID, GRID):
        raise DimensionError(f"expected a {GRID}x{GRID} index grid, got {indices.shape}")
    keep = schedule.keep_mask(GRID)
    kept = [((i, j), int(indices[i, j]))
            for i in range(GRID) for j in range(GRID) if keep[i, j]]
    return MaskedIndexMap(kept=kept, mask=~keep, schedule=schedule)


def masked_from_indices(values, schedule: MaskSchedule, grid: int = GRID) -> MaskedIndexMap:
    """Rebuild a MaskedIndexMap from decoder-side kept index values."""
    pos = schedule.kept_positions(grid)
    if len(values) != len(pos):
        raise CorruptStreamError(
            f"{schedule.name} expects {len(pos)} kept indices, got {len(values)}")
    keep = schedule.keep_mask(grid)
    return MaskedIndexMap(kept=list(zip(pos, (int(v) for v in values))), mask=~keep,
                          schedule=schedule)


def select_schedule(score: float) -> MaskSchedule:
    """Easy regions mask hardest; boundary scores route to the medium schedule."""
    if score < THRESHOLD_EASY:
        return MaskSchedule.M1_9
    if score > THRESHOLD_TOUGH:
        return MaskSchedule.M1_2
    return MaskSchedule.M1_4


# ---------------------------------------------------------------------------
# complexity metrics
# ---------------------------------------------------------------------------

def _histogram_entropy(values01: np.ndarray) -> float:
    hist, _ = np.histogram(values01, bins=256, range=(0.0, 1.0))
    p = hist[hist > 0] / values01.size
    return float(-(p * np.log2(p)).sum())


def region_metrics(region: np.ndarray) -> np.ndarray:
    """Raw (entropy, contrast, color diversity, high-frequency fraction) of a
    (3, H, W) region with pixel values in [-1, 1]."""
    region = np.asarray(region, dtype=np.float64)
    if region.ndim != 3 or region.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) region, got {region.shape}")
    rgb = np.clip((region + 1.0) / 2.0, 0.0, 1.0)
    luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]

    entropy = _histogram_entropy(luma)
    contrast = float(luma.std())
    color = float(np.mean([_histogram_entropy(rgb[c]) for c in range(3)]))

    power = np.abs(np.fft.fftshift(np.fft.fft2(luma))) ** 2
    total = power.sum()
    if total <= 0.0:
        freq = 0.0
    else:
        h, w = luma.shape
        r0, c0 = h // 2 - h // 8, w // 2 - w // 8
        low = power[r0:r0 + h // 4, c0:c0 + w // 4].sum()
        freq = float(1.0 - low / total)
    return np.array([entropy, contrast, color, freq])


@dataclass
class ComplexityStats:
    """Per-metric min/max observed over a calibration corpus."""

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        self.mins = np.asarray(self.mins, dtype=np.float64)
        self.maxs = np.asarray(self.maxs, dtype=np.float64)
        if self.mins.shape != (4,) or self.maxs.shape != (4,):
            raise ConfigurationError("complexity stats need 4 mins and 4 maxs")
        if np.any(self.maxs < self.mins):
            raise ConfigurationError("complexity stats require max >= min per metric")

    def save(self, path) -> None:
        blob = STATS_MAGIC + struct.pack("<B", STATS_VERSION)
        for lo, hi in zip(self.mins, self.maxs):
            blob += struct.pack("<dd", lo, hi)
        Path(path).write_bytes(blob)

    @classmethod
    def load(cls, path) -> "ComplexityStats":
        blob = Path(path).read_bytes()
        if len(blob) != 5 + 64:
            raise CorruptStreamError(f"complexity stats file has {len(blob)} bytes, expected 69")
        if blob[:4] != STATS_MAGIC:
            raise CorruptStreamError("bad complexity stats magic")
        if blob[4] != STATS_VERSION:
            raise CorruptStreamError(f"unsupported complexity stats version {blob[4]}")
        vals = struct.unpack("<8d", blob[5:])
        return cls(mins=np.array(vals[0::2]), maxs=np.array(vals[1::2]))


def calibrate(corpus) -> ComplexityStats:
    """Min/max of each metric over an iterable of (3, H, W) regions."""
    mins = maxs = None
    for region in corpus:
        m = region_metrics(region)
        mins = m.copy() if mins is None else np.minimum(mins, m)
        maxs = m.copy() if maxs is None else np.maximum(maxs, m)
    if mins is None:
        raise ConfigurationError("cannot calibrate complexity stats on an empty corpus")
    return ComplexityStats(mins=mins, maxs=maxs)


def complexity_score(region: np.ndarray, stats: ComplexityStats | None) -> float:
    """Mean of the four normalized metrics, clamped to [0, 1].

    Degenerate metrics (min == max over the calibration corpus) score 0.5,
    biasing toward the medium schedule.
    """
    if stats is None:
        raise ConfigurationError("complexity score requires calibrated stats")
    raw = region_metrics(region)
    span = stats.maxs - stats.mins
    normed = np.where(span > 0.0,
                      np.clip((raw - stats.mins) / np.where(span > 0.0, span, 1.0), 0.0, 1.0),
                      0.5)
    return float(normed.mean())
