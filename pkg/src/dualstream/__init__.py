"""Dual-stream masked-codebook image codec.

Two parallel representations of each 256x256 tile are coded: a masked grid of
codebook indices (perceptual detail) and a heavily downsampled continuous
latent (fidelity). A cross-attention token predictor restores the masked
indices using the continuous latent as guidance, and a correction decoder
injects continuous features into the pixel decoder.
"""

__version__ = "0.1.0"

from .config import PipelineConfig
from .errors import (
    BadMagicError,
    ConfigurationError,
    CorruptStreamError,
    DimensionError,
    DualStreamError,
    EncodeError,
    LengthMismatchError,
    NumericError,
    TruncatedStreamError,
    VersionError,
)
