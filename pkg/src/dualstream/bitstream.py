"""Bit-exact container format, fixed-width index packing and a range coder.

Wire conventions:
  * integer header fields are little-endian;
  * inside bit-packed substreams, values are written most-significant-bit
    first ("big-endian bit order within bytes"), final partial bytes are
    zero-padded.

The range coder is a carry-less Subbotin-style coder with 64-bit low/range
registers: bytes are emitted once the top byte of the interval is settled, an
underflow clamp keeps the interval wide enough to divide, and the flush emits
the shortest byte prefix that still pins the final interval (the decoder
zero-pads past the end of the stream). Cumulative tables must not exceed
2^16 total mass.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    ConfigurationError,
    CorruptStreamError,
    EncodeError,
    LengthMismatchError,
    TruncatedStreamError,
    VersionError,
)
from .masking import MaskSchedule

MAGIC = b"HYFL"
VERSION_PACKED = 1      # fixed-width packed indices
VERSION_RC_INDEX = 2    # adaptively range-coded indices

_MASK64 = (1 << 64) - 1
_TOP = 1 << 56
_BOTTOM = 1 << 48
CDF_TOTAL_MAX = 1 << 16


def index_bits(n_z: int) -> int:
    """Fixed-width bits per codeword index."""
    if n_z < 2:
        raise ConfigurationError(f"n_z must be >= 2, got {n_z}")
    return int(math.ceil(math.log2(n_z)))


# ---------------------------------------------------------------------------
# bit-level io
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BitString:
    data: bytes
    nbits: int

    def __post_init__(self):
        if len(self.data) != (self.nbits + 7) // 8:
            raise LengthMismatchError(
                f"bitstring holds {len(self.data)} bytes for {self.nbits} bits")

    @staticmethod
    def empty() -> "BitString":
        return BitString(b"", 0)


class BitWriter:
    """MSB-first bit accumulator."""

    def __init__(self):
        self._out = bytearray()
        self._acc = 0
        self._nacc = 0

    def write(self, value: int, nbits: int) -> None:
        if value < 0 or (nbits < 64 and value >> nbits):
            raise EncodeError(f"value {value} does not fit in {nbits} bits")
        self._acc = (self._acc << nbits) | value
        self._nacc += nbits
        while self._nacc >= 8:
            self._nacc -= 8
            self._out.append((self._acc >> self._nacc) & 0xFF)
        self._acc &= (1 << self._nacc) - 1

    def write_bits(self, bits: BitString) -> None:
        full, rem = divmod(bits.nbits, 8)
        for b in bits.data[:full]:
            self.write(b, 8)
        if rem:
            self.write(bits.data[full] >> (8 - rem), rem)

    def getvalue(self) -> BitString:
        nbits = len(self._out) * 8 + self._nacc
        data = bytes(self._out)
        if self._nacc:
            data += bytes([(self._acc << (8 - self._nacc)) & 0xFF])
        return BitString(data, nbits)


class BitReader:
    """MSB-first reader bounded by a declared bit length.

    Reads past `nbits` raise TruncatedStreamError even when the underlying
    buffer holds more bytes, so trailing canary data is never consumed.
    """

    def __init__(self, data: bytes, nbits: int):
        if nbits > len(data) * 8:
            raise TruncatedStreamError(
                f"declared {nbits} bits but buffer holds {len(data) * 8}")
        self._data = data
        self._nbits = nbits
        self._pos = 0

    @property
    def remaining(self) -> int:
        return self._nbits - self._pos

    def read(self, nbits: int) -> int:
        if nbits > self.remaining:
            raise TruncatedStreamError(
                f"read of {nbits} bits exceeds declared length ({self.remaining} left)")
        value = 0
        pos = self._pos
        for _ in range(nbits):
            byte = self._data[pos >> 3]
            value = (value << 1) | ((byte >> (7 - (pos & 7))) & 1)
            pos += 1
        self._pos = pos
        return value


# ---------------------------------------------------------------------------
# fixed-width index packing
# ---------------------------------------------------------------------------

def pack_indices(masked, n_z: int) -> BitString:
    """Pack kept indices (row-major keep order) at ceil(log2 n_z) bits each."""
    width = index_bits(n_z)
    w = BitWriter()
    for _, idx in masked.kept:
        if not 0 <= idx < n_z:
            raise EncodeError(f"index {idx} out of range for n_z={n_z}")
        w.write(int(idx), width)
    return w.getvalue()


def unpack_indices(bits: BitString, count: int, n_z: int) -> list[int]:
    width = index_bits(n_z)
    if bits.nbits != count * width:
        raise LengthMismatchError(
            f"index substream is {bits.nbits} bits, expected {count * width}")
    r = BitReader(bits.data, bits.nbits)
    out = [r.read(width) for _ in range(count)]
    for idx in out:
        if idx >= n_z:
            raise CorruptStreamError(f"unpacked index {idx} >= n_z={n_z}")
    return out


# ---------------------------------------------------------------------------
# range coder
# ---------------------------------------------------------------------------

def _check_cdf(cdf: np.ndarray) -> np.ndarray:
    cdf = np.asarray(cdf, dtype=np.uint64)
    if cdf.ndim != 1 or cdf.size < 2 or cdf[0] != 0:
        raise ConfigurationError("cdf must be 1-D with cdf[0] == 0")
    if int(cdf[-1]) > CDF_TOTAL_MAX:
        raise ConfigurationError(f"cdf total {int(cdf[-1])} exceeds {CDF_TOTAL_MAX}")
    if np.any(np.diff(cdf.astype(np.int64)) <= 0):
        raise ConfigurationError("cdf must be strictly increasing")
    return cdf


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK64
        self._out = bytearray()

    def encode(self, sym: int, cdf: np.ndarray) -> None:
        total = int(cdf[-1])
        if not 0 <= sym < len(cdf) - 1:
            raise EncodeError(f"symbol {sym} outside cdf support of {len(cdf) - 1}")
        r = self.range // total
        self.low += r * int(cdf[sym])
        self.range = r * (int(cdf[sym + 1]) - int(cdf[sym]))
        self._normalize()

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) >= _TOP:
                if self.range >= _BOTTOM:
                    return
                # interval straddles a byte boundary but is too narrow to
                # split further: clamp it below the boundary, after which the
                # top byte is settled and can be released like any other
                self.range = ((1 << 64) - self.low) & (_BOTTOM - 1)
            self._out.append(self.low >> 56)
            self.low = (self.low << 8) & _MASK64
            self.range <<= 8

    def finish(self) -> bytes:
        # emit the shortest byte prefix whose zero-extension lands in [low, low+range)
        hi = self.low + self.range
        for n in range(0, 9):
            step = 1 << (64 - 8 * n) if n < 8 else 1
            v = ((self.low + step - 1) // step) * step
            if v < hi:
                self._out += v.to_bytes(8, "big")[:n]
                return bytes(self._out)
        raise AssertionError("range coder flush failed")  # unreachable: range >= 1


class RangeDecoder:
    """Mirrors the encoder's low/range trajectory byte for byte."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 8
        self.low = 0
        self.range = _MASK64
        self.code = int.from_bytes(data[:8].ljust(8, b"\0"), "big")

    def _next_byte(self) -> int:
        b = self._data[self._pos] if self._pos < len(self._data) else 0
        self._pos += 1
        return b

    def decode(self, cdf: np.ndarray) -> int:
        total = int(cdf[-1])
        r = self.range // total
        # corrupt input can push the code outside [low, low+range); clamping
        # keeps the state trajectory valid and the output in-support
        q = min(max((self.code - self.low) // r, 0), total - 1)
        sym = int(np.searchsorted(cdf, q, side="right")) - 1
        self.low += r * int(cdf[sym])
        self.range = r * (int(cdf[sym + 1]) - int(cdf[sym]))
        self._normalize()
        return sym

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) >= _TOP:
                if self.range >= _BOTTOM:
                    return
                self.range = ((1 << 64) - self.low) & (_BOTTOM - 1)
            self.code = ((self.code << 8) | self._next_byte()) & _MASK64
            self.low = (self.low << 8) & _MASK64
            self.range <<= 8


def rc_encode(symbols, cdf) -> bytes:
    """Range-code a symbol sequence under one frozen cumulative table."""
    cdf = _check_cdf(cdf)
    enc = RangeEncoder()
    for s in symbols:
        enc.encode(int(s), cdf)
    return enc.finish()


def rc_decode(data: bytes, count: int, cdf) -> list[int]:
    """Decode `count` symbols; arbitrary input bytes yield in-support symbols."""
    cdf = _check_cdf(cdf)
    dec = RangeDecoder(data)
    return [dec.decode(cdf) for _ in range(count)]


def estimate_bits(symbols, cdf) -> float:
    """Ideal code length -sum log2 p(s) under the quantized table."""
    cdf = np.asarray(cdf, dtype=np.float64)
    total = cdf[-1]
    syms = np.asarray(list(symbols), dtype=np.int64)
    p = (cdf[syms + 1] - cdf[syms]) / total
    return float(-np.log2(p).sum()) if syms.size else 0.0


def quantize_cdf(pmf: np.ndarray, total: int = CDF_TOTAL_MAX) -> np.ndarray:
    """Turn a probability vector into a strictly increasing integer cdf.

    Every symbol keeps mass >= 1 so the coder can always represent it.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.size
    if n < 1 or total < n:
        raise ConfigurationError(f"cannot quantize {n} symbols into total {total}")
    pmf = np.maximum(pmf, 0.0)
    s = pmf.sum()
    pmf = np.full(n, 1.0 / n) if s <= 0 else pmf / s
    freq = np.maximum(1, np.floor(pmf * (total - n)).astype(np.int64) + 1)
    # largest-remainder style fixup to land exactly on `total`
    diff = total - int(freq.sum())
    if diff > 0:
        order = np.argsort(-pmf, kind="stable")
        freq[order[:diff]] += 1
    while diff < 0:
        k = int(np.argmax(freq))
        take = min(freq[k] - 1, -diff)
        freq[k] -= take
        diff += take
    cdf = np.zeros(n + 1, dtype=np.uint64)
    cdf[1:] = np.cumsum(freq)
    return cdf


class AdaptiveModel:
    """Count-based adaptive frequency model for the optional coded-index mode.

    Encoder and decoder start from uniform counts and apply identical updates,
    so no table needs to be transmitted.
    """

    def __init__(self, n_symbols: int):
        if n_symbols < 1 or n_symbols * 2 > CDF_TOTAL_MAX:
            raise ConfigurationError(f"adaptive model cannot hold {n_symbols} symbols")
        self._counts = np.ones(n_symbols, dtype=np.int64)
        self._cdf = np.zeros(n_symbols + 1, dtype=np.uint64)
        self._dirty = True

    def cdf(self) -> np.ndarray:
        if self._dirty:
            self._cdf[1:] = np.cumsum(self._counts)
            self._dirty = False
        return self._cdf

    def update(self, sym: int) -> None:
        self._counts[sym] += 32
        if int(self._counts.sum()) > CDF_TOTAL_MAX - 64:
            self._counts = np.maximum(1, self._counts // 2)
        self._dirty = True


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

@dataclass
class TileRecord:
    schedule: MaskSchedule
    index_bits: BitString
    cont_bits: BitString


@dataclass
class BitstreamContainer:
    width: int
    height: int
    tile: int
    n_z: int
    tiles: list
    version: int = VERSION_PACKED

    def tile_grid(self) -> tuple[int, int]:
        rows = -(-self.height // self.tile)
        cols = -(-self.width // self.tile)
        return rows, cols


def _expected_tiles(width, height, tile):
    return (-(-height // tile)) * (-(-width // tile))


def container_write(container: BitstreamContainer) -> bytes:
    c = container
    if c.tile < 1:
        raise EncodeError(f"tile size must be positive, got {c.tile}")
    if len(c.tiles) != _expected_tiles(c.width, c.height, c.tile):
        raise EncodeError(
            f"tile count {len(c.tiles)} does not cover {c.width}x{c.height} at tile {c.tile}")
    out = bytearray(MAGIC)
    out += struct.pack("<BHHHH", c.version, c.width, c.height, c.tile, c.n_z)
    for t in c.tiles:
        out += struct.pack("<B", t.schedule.code)
        out += struct.pack("<I", t.index_bits.nbits) + t.index_bits.data
        out += struct.pack("<I", t.cont_bits.nbits) + t.cont_bits.data
    return bytes(out)


def container_read(data: bytes) -> BitstreamContainer:
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise TruncatedStreamError(f"container truncated while reading {what}")
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise BadMagicError("not a dualstream container")
    version, width, height, tile, n_z = struct.unpack("<BHHHH", take(9, "header"))
    if version not in (VERSION_PACKED, VERSION_RC_INDEX):
        raise VersionError(f"unsupported container version {version}")
    if tile < 1:
        raise LengthMismatchError("tile size 0")
    if n_z < 2:
        raise CorruptStreamError(f"n_z {n_z} below minimum codebook size")
    tiles = []
    for i in range(_expected_tiles(width, height, tile)):
        (code,) = struct.unpack("<B", take(1, f"tile {i} schedule"))
        try:
            schedule = MaskSchedule.from_code(code)
        except ValueError as e:
            raise CorruptStreamError(str(e)) from None
        (ibits,) = struct.unpack("<I", take(4, f"tile {i} index length"))
        idata = take((ibits + 7) // 8, f"tile {i} index payload")
        (cbits,) = struct.unpack("<I", take(4, f"tile {i} continuous length"))
        cdata = take((cbits + 7) // 8, f"tile {i} continuous payload")
        if version == VERSION_PACKED:
            expect = schedule.kept_count(16) * index_bits(n_z)
            if ibits != expect:
                raise LengthMismatchError(
                    f"tile {i}: index substream {ibits} bits, schedule implies {expect}")
        tiles.append(TileRecord(schedule, BitString(idata, ibits), BitString(cdata, cbits)))
    if off != len(data):
        raise LengthMismatchError(f"{len(data) - off} trailing bytes after last tile")
    return BitstreamContainer(width, height, tile, n_z, tiles, version)


def bpp(container: BitstreamContainer) -> tuple[float, dict]:
    """Bits per pixel of the serialized container, plus a breakdown that sums
    exactly to the total. Padding and record framing are booked under
    'header' so the index/continuous shares stay the declared payload bits."""
    pixels = container.width * container.height
    if pixels == 0:
        raise ConfigurationError("bpp undefined for a zero-pixel image")
    total_bits = len(container_write(container)) * 8
    idx = sum(t.index_bits.nbits for t in container.tiles)
    cont = sum(t.cont_bits.nbits for t in container.tiles)
    breakdown = {
        "header": (total_bits - idx - cont) / pixels,
        "index": idx / pixels,
        "continuous": cont / pixels,
    }
    return total_bits / pixels, breakdown
