"""Exception taxonomy shared across the codec.

Parse failures are deliberately fine-grained so callers (and tests) can tell
a bad magic from a truncated payload from an internally inconsistent length.
"""


class DualStreamError(Exception):
    """Base class for all codec errors."""


class DimensionError(DualStreamError):
    """Tensor/feature shapes do not match an operation's contract."""


class ConfigurationError(DualStreamError):
    """Invalid or inconsistent configuration, or use of an untrained model."""


class NumericError(DualStreamError):
    """Non-finite value where the numerics contract requires finiteness."""


class EncodeError(DualStreamError):
    """Invalid data handed to the encoder (e.g. symbol out of range)."""


class InvariantViolation(DualStreamError):
    """A structural invariant (e.g. frozen-parameter discipline) was broken."""


class CorruptStreamError(DualStreamError):
    """Decoded data violates the bitstream contract."""


class BadMagicError(CorruptStreamError):
    """Container does not start with the expected magic bytes."""


class VersionError(CorruptStreamError):
    """Container version is not supported by this build."""


class TruncatedStreamError(CorruptStreamError):
    """Stream ends before a declared length is satisfied."""


class LengthMismatchError(CorruptStreamError):
    """Declared lengths are mutually inconsistent."""
