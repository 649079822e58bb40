"""Continuous stream: 4x mean-pool, a small quantized-latent codec, and a
per-channel logistic entropy model driving the range coder.

Substream layout (bit-packed, MSB first): u16 symbol count, u8 channel count,
u8 grid side, range-coded payload, trailing u32 payload bit-length acting as
an integrity check.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .bitstream import BitReader, BitString, BitWriter, RangeDecoder, RangeEncoder, quantize_cdf
from .errors import CorruptStreamError, DimensionError, NumericError
from .nets import Conv

_LOG2 = float(np.log(2.0))


def mean_pool4(image: np.ndarray) -> np.ndarray:
    """Exact 4x4 block means of a (3, H, W) image; H and W multiples of 4."""
    c, h, w = image.shape
    if h % 4 or w % 4:
        raise DimensionError(f"mean_pool4 needs multiples of 4, got {image.shape}")
    return image.reshape(c, h // 4, 4, w // 4, 4).mean(axis=(2, 4))


class EntropyModel:
    """Independent logistic distribution per latent channel over [-L, L]."""

    def __init__(self, graph, channels: int, support: int, prefix="cont.prior"):
        self.channels = channels
        self.support = support
        self.mu = graph.parameter(f"{prefix}.mu", np.zeros(channels))
        self.log_scale = graph.parameter(f"{prefix}.log_scale", np.zeros(channels))

    def noisy_bits(self, y: ad.Tensor) -> ad.Tensor:
        """Total code length estimate (bits) of noise-smoothed latents."""
        b = y.data.shape[0]
        mu = ad.reshape(self.mu, (1, self.channels, 1, 1))
        inv_s = ad.reshape(ad.exp(ad.mul(self.log_scale, -1.0)), (1, self.channels, 1, 1))
        upper = ad.sigmoid(ad.mul(ad.sub(ad.add(y, 0.5), mu), inv_s))
        lower = ad.sigmoid(ad.mul(ad.sub(ad.add(y, -0.5), mu), inv_s))
        p = ad.add(ad.sub(upper, lower), 1e-12)
        return ad.mul(ad.sum_all(ad.log(p)), -1.0 / _LOG2)

    def frozen_cdfs(self) -> list[np.ndarray]:
        """Quantized per-channel CDF tables; tails folded into the endpoints."""
        out = []
        ks = np.arange(-self.support, self.support + 1, dtype=np.float64)
        for ch in range(self.channels):
            mu = self.mu.data[ch]
            s = np.exp(self.log_scale.data[ch])
            upper = _logistic((ks + 0.5 - mu) / s)
            lower = _logistic((ks - 0.5 - mu) / s)
            pmf = upper - lower
            pmf[0] = upper[0]
            pmf[-1] = 1.0 - lower[-1]
            out.append(quantize_cdf(pmf))
        return out


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


class ContStream:
    """Downsample, encode, quantize and entropy-code the fidelity latent."""

    def __init__(self, graph, rng, cfg, prefix="cont"):
        self.cfg = cfg
        self.graph = graph
        ce = cfg.cont_enc_channels
        cd = cfg.cont_dec_channels
        f = cfg.cont_channels
        self.enc = [
            Conv(graph, f"{prefix}.enc.c0", rng, 3, ce[0], stride=2),
            Conv(graph, f"{prefix}.enc.c1", rng, ce[0], ce[1], stride=2),
            Conv(graph, f"{prefix}.enc.c2", rng, ce[1], ce[2], stride=2),
            Conv(graph, f"{prefix}.enc.head", rng, ce[2], f, k=1, pad=0),
        ]
        self.dec = [
            Conv(graph, f"{prefix}.dec.stem", rng, f, cd[0], k=1, pad=0),
            Conv(graph, f"{prefix}.dec.c0", rng, cd[0], cd[1]),
            Conv(graph, f"{prefix}.dec.c1", rng, cd[1], cd[2]),
            Conv(graph, f"{prefix}.dec.c2", rng, cd[2], cd[2]),
            Conv(graph, f"{prefix}.dec.head", rng, cd[2], 3, scale=0.1),
        ]
        self.prior = EntropyModel(graph, f, cfg.cont_support, prefix=f"{prefix}.prior")

    def _encode_graph(self, pooled: ad.Tensor) -> ad.Tensor:
        h = pooled
        for conv in self.enc[:-1]:
            h = ad.relu(conv(h))
        return self.enc[-1](h)

    def _decode_graph(self, y: ad.Tensor) -> ad.Tensor:
        h = ad.relu(self.dec[0](y))
        for conv in self.dec[1:-1]:
            h = ad.relu(conv(ad.upsample_nearest(h, 2)))
        return ad.tanh(self.dec[-1](h))

    def latent(self, image: np.ndarray) -> np.ndarray:
        """(3, tile, tile) image -> raw continuous latent (f, g, g)."""
        pooled = mean_pool4(np.asarray(image, dtype=np.float64))
        return self._encode_graph(ad.Tensor(pooled[None])).data[0]

    # -- coding ----------------------------------------------------------------

    def cont_encode(self, image: np.ndarray) -> tuple[np.ndarray, BitString, dict]:
        """Quantize the latent and range-code it; returns (symbols, bits, info)."""
        y = self.latent(image)
        L = self.cfg.cont_support
        rounded = np.floor(y + 0.5)
        symbols = np.clip(rounded, -L, L)
        saturated = int((rounded != symbols).sum())
        symbols = symbols.astype(np.int64)

        cdfs = self.prior.frozen_cdfs()
        enc = RangeEncoder()
        f, gh, gw = symbols.shape
        if gh != gw or gh > 255 or f > 255:
            raise DimensionError(f"continuous latent grid {symbols.shape} not encodable")
        for ch in range(f):
            cdf = cdfs[ch]
            for v in (symbols[ch].reshape(-1) + L):
                enc.encode(int(v), cdf)
        payload = enc.finish()

        w = BitWriter()
        w.write(symbols.size, 16)
        w.write(f, 8)
        w.write(gh, 8)
        for byte in payload:
            w.write(byte, 8)
        w.write(len(payload) * 8, 32)
        info = {"saturated": saturated, "payload_bits": len(payload) * 8}
        return symbols, w.getvalue(), info

    def cont_decode(self, bits: BitString) -> np.ndarray:
        """Exact symbol recovery; the integer-valued latent is the decoder-side
        continuous representation."""
        if bits.nbits < 64:
            raise CorruptStreamError(f"continuous substream of {bits.nbits} bits lacks framing")
        r = BitReader(bits.data, bits.nbits)
        count = r.read(16)
        f = r.read(8)
        side = r.read(8)
        payload_bits = bits.nbits - 64
        if count != f * side * side:
            raise CorruptStreamError(
                f"symbol count {count} inconsistent with {f}x{side}x{side} latent")
        if count == 0:
            # zero-symbol header: all-zero latent at the model's default grid
            side = side or self.cfg.tile // 32
            return np.zeros((self.cfg.cont_channels, side, side))
        if f != self.cfg.cont_channels:
            raise CorruptStreamError(
                f"stream carries {f} latent channels, model expects {self.cfg.cont_channels}")
        payload = bytearray()
        left = payload_bits
        while left >= 8:
            payload.append(r.read(8))
            left -= 8
        if left:
            payload.append(r.read(left) << (8 - left))
        declared = r.read(32)
        if declared != payload_bits:
            raise CorruptStreamError(
                f"payload trailer declares {declared} bits, framing implies {payload_bits}")

        L = self.cfg.cont_support
        cdfs = self.prior.frozen_cdfs()
        dec = RangeDecoder(bytes(payload))
        out = np.empty((f, side, side), dtype=np.float64)
        for ch in range(f):
            cdf = cdfs[ch]
            flat = [dec.decode(cdf) - L for _ in range(side * side)]
            out[ch] = np.asarray(flat, dtype=np.float64).reshape(side, side)
        return out

    def decoded_latent(self, image: np.ndarray) -> np.ndarray:
        """Encoder-side replica of the decoder's latent (round + clamp)."""
        L = self.cfg.cont_support
        return np.clip(np.floor(self.latent(image) + 0.5), -L, L)

    # -- training ----------------------------------------------------------------

    def train_step(self, batch: np.ndarray, opt: ad.Adam, rng, step: int) -> dict:
        """Rate-distortion step with additive-uniform-noise quantization proxy.

        The rate term is normalized per original-tile pixel and distortion is
        8-bit-scale MSE of the pooled image, so lambda follows the usual
        learned-codec convention.
        """
        pooled = np.stack([mean_pool4(img) for img in np.asarray(batch, dtype=np.float64)])
        x = ad.Tensor(pooled)
        y = self._encode_graph(x)
        noise = rng.uniform(-0.5, 0.5, size=y.data.shape)
        y_noisy = ad.add(y, ad.Tensor(noise))
        bits = self.prior.noisy_bits(y_noisy)
        recon = self._decode_graph(y_noisy)
        dist = ad.mul(ad.mse_loss(recon, x), 127.5 ** 2)
        b, _, h, w = np.asarray(batch).shape  # rate per original-tile pixel
        rate = ad.mul(bits, 1.0 / (b * h * w))
        loss = ad.add(rate, ad.mul(dist, self.cfg.lambda_rate))
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite continuous-stream loss at step {step}")
        self.graph.zero_grad()
        ad.backward(loss)
        opt.step()
        return {"total": loss.item(), "rate_bpp": rate.item(), "dist": dist.item()}
