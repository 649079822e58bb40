"""PNG / binary-PPM image io and [-1, 1] <-> 8-bit conversion."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError


def to_unit_range(arr_u8: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float64 in [-1, 1]."""
    return arr_u8.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [-1, 1] -> (H, W, 3) uint8."""
    return np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"image not found: {path}")
    with Image.open(path) as im:
        return to_unit_range(np.asarray(im.convert("RGB")))


def save_image(image: np.ndarray, path) -> None:
    path = Path(path)
    pil = Image.fromarray(to_uint8(image))
    if path.suffix.lower() in (".ppm", ".pnm"):
        pil.save(path, format="PPM")
    else:
        pil.save(path)


def psnr_8bit(a: np.ndarray, b: np.ndarray, cap: float = 99.0) -> float:
    """PSNR between two [-1, 1] images measured on their 8-bit renderings."""
    ua = to_uint8(a).astype(np.float64)
    ub = to_uint8(b).astype(np.float64)
    mse = float(np.mean((ua - ub) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(255.0 ** 2 / mse))
