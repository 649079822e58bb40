"""Synthetic texture corpora for desk-scale training and evaluation.

Tiles are (3, size, size) float64 in [-1, 1]. The engineered corpus mixes
flat / gradient / noise tiles in fixed proportions with amplitudes tuned so
the three classes land in the easy / medium / tough complexity bands.
"""

from __future__ import annotations

import numpy as np


def flat_tile(rng, size=256):
    color = rng.uniform(-0.8, 0.8, size=3)
    return np.broadcast_to(color[:, None, None], (3, size, size)).copy()


def gradient_tile(rng, size=256):
    """Gentle linear ramp: mid-band complexity by construction."""
    theta = rng.uniform(0, 2 * np.pi)
    ii, jj = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    ramp = np.cos(theta) * ii + np.sin(theta) * jj
    ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min()) - 0.5
    center = rng.uniform(-0.4, 0.4, size=3)
    span = rng.uniform(0.25, 0.35)
    return np.clip(center[:, None, None] + span * ramp[None], -1.0, 1.0)


def sinusoid_tile(rng, size=256):
    fx, fy = rng.integers(1, 5, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    wave = np.sin(2 * np.pi * fx * ii / size + phase[0]) * np.sin(2 * np.pi * fy * jj / size + phase[1])
    base = rng.uniform(-0.4, 0.4, size=3)
    amp = rng.uniform(0.2, 0.5, size=3)
    return np.clip(base[:, None, None] + amp[:, None, None] * wave[None], -1.0, 1.0)


def blob_tile(rng, size=256):
    base = rng.uniform(-0.5, 0.5, size=3)
    tile = np.broadcast_to(base[:, None, None], (3, size, size)).copy()
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0, size, size=2)
        sigma = rng.uniform(size / 12, size / 4)
        color = rng.uniform(-0.6, 0.6, size=3)
        bump = np.exp(-((ii - cy) ** 2 + (jj - cx) ** 2) / (2 * sigma ** 2))
        tile += color[:, None, None] * bump[None]
    return np.clip(tile, -1.0, 1.0)


def noise_tile(rng, size=256, amp=1.0):
    return rng.uniform(-amp, amp, size=(3, size, size))


def toy_corpus(seed: int, n: int = 32, size: int = 256) -> list[np.ndarray]:
    """Mostly-smooth textures: learnable by a small codec, varied enough to
    exercise every mask schedule."""
    rng = np.random.default_rng(seed)
    makers = [flat_tile, gradient_tile, sinusoid_tile, blob_tile,
              lambda r, s=size: noise_tile(r, s, amp=0.5)]
    weights = [0.25, 0.25, 0.2, 0.2, 0.1]
    tiles = []
    for _ in range(n):
        maker = makers[int(rng.choice(len(makers), p=weights))]
        tiles.append(maker(rng, size))
    return tiles


def engineered_corpus(seed: int, n: int = 40, size: int = 256):
    """Exactly 70% flat, 20% gradient, 10% noise tiles (n multiple of 10),
    interleaved deterministically. Returns (tiles, labels)."""
    if n % 10:
        raise ValueError(f"engineered corpus size must be a multiple of 10, got {n}")
    rng = np.random.default_rng(seed)
    tiles, labels = [], []
    plan = ["flat"] * (7 * n // 10) + ["gradient"] * (2 * n // 10) + ["noise"] * (n // 10)
    order = rng.permutation(len(plan))
    for k in order:
        kind = plan[k]
        if kind == "flat":
            tiles.append(flat_tile(rng, size))
        elif kind == "gradient":
            tiles.append(gradient_tile(rng, size))
        else:
            tiles.append(noise_tile(rng, size))
        labels.append(kind)
    return tiles, labels
