"""Correction network: a duplicate pixel decoder driven by the continuous
latent whose per-stage features are injected into the VQ decoder.

Fusion is a zero-initialized 1x1 projection added to the VQ decoder's stage
pre-activation, so an untrained correction path reproduces the plain VQ
decode exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, InvariantViolation, NumericError
from .nets import Conv, PerceptualProxy, PixelDecoder
from .vq import VqStream, dequantize, quantize_to_indices


@dataclass
class Reconstruction:
    """Decoded tile plus the latents it came from; bpp is filled by the
    pipeline once container accounting is known."""

    image: np.ndarray
    vq_latent: np.ndarray
    cont_latent: np.ndarray
    bpp_breakdown: dict = field(default_factory=dict)


class CorrectionNet:
    """Adapter + duplicate decoder + per-stage 1x1 fusion projections."""

    def __init__(self, graph, rng, cfg, prefix="corr"):
        self.cfg = cfg
        self.prefix = prefix
        self.adapter = Conv(graph, f"{prefix}.adapter", rng,
                            cfg.cont_channels, cfg.codeword_dim, k=1, pad=0)
        self.decoder = PixelDecoder(graph, f"{prefix}.dec", rng,
                                    cfg.codeword_dim, cfg.dec_channels, with_head=False)
        self.fusions = [Conv(graph, f"{prefix}.fuse{i}", rng, ch, ch, k=1, pad=0, zero=True)
                        for i, ch in enumerate(cfg.dec_channels)]

    def copy_from_vq_decoder(self, graph, vq_prefix="vq.dec") -> None:
        """Replicate the trained VQ decoder's stem and stages (head excluded);
        adapter and fusion projections stay fresh."""
        src_prefix = f"{vq_prefix}."
        dst_prefix = f"{self.prefix}.dec."
        for name, p in graph.params.items():
            if not name.startswith(src_prefix) or ".head." in name:
                continue
            dst = dst_prefix + name[len(src_prefix):]
            graph.params[dst].data = p.data.copy()

    def injections(self, cont_latent: ad.Tensor, grid: int) -> list[ad.Tensor]:
        """Per-stage projected correction features sized for a VQ latent of
        spatial side `grid`."""
        lat = ad.nearest_resize(cont_latent, (grid, grid)) \
            if cont_latent.data.shape[2:] != (grid, grid) else cont_latent
        adapted = self.adapter(lat)
        _, feats = self.decoder.forward(adapted)
        return [fuse(feat) for fuse, feat in zip(self.fusions, feats)]


def fused_decode(vq: VqStream, corr: CorrectionNet, vq_latent: np.ndarray,
                 cont_latent: np.ndarray) -> Reconstruction:
    """Run both decoders, adding projected correction features into each VQ
    up-sampling stage before its nonlinearity."""
    out = _fused_graph(vq, corr, ad.Tensor(np.asarray(vq_latent, dtype=np.float64)[None]),
                       ad.Tensor(np.asarray(cont_latent, dtype=np.float64)[None]))
    return Reconstruction(image=out.data[0], vq_latent=np.asarray(vq_latent),
                          cont_latent=np.asarray(cont_latent))


def _fused_graph(vq: VqStream, corr: CorrectionNet, vq_latent: ad.Tensor,
                 cont_latent: ad.Tensor) -> ad.Tensor:
    b = vq_latent.data.shape[0]
    side = vq_latent.data.shape[2]
    inj = corr.injections(cont_latent, side)
    for i, (t, ch) in enumerate(zip(inj, vq.decoder.channels)):
        expect = (b, ch, side * 2 ** (i + 1), side * 2 ** (i + 1))
        if t.data.shape != expect:
            raise DimensionError(f"fusion stage {i}: injected {t.data.shape}, expected {expect}")
    out, _ = vq.decode_graph(vq_latent, injections=inj)
    return out


def pixel_loss(x: ad.Tensor, xhat: ad.Tensor, w1: float, w2: float,
               proxy: PerceptualProxy) -> ad.Tensor:
    """w1 * mean absolute error + w2 * squared feature distance under the
    frozen random proxy net."""
    if x.data.shape != xhat.data.shape:
        raise DimensionError(f"pixel_loss shapes differ: {x.data.shape} vs {xhat.data.shape}")
    loss = ad.mul(ad.l1_loss(x, xhat), w1)
    if w2 != 0.0:
        perceptual = ad.mse_loss(proxy.features(x), proxy.features(xhat))
        loss = ad.add(loss, ad.mul(perceptual, w2))
    return loss


class BridgeTrainer:
    """Stage-3 training: only CorrectionNet parameters move."""

    def __init__(self, graph, vq: VqStream, cont, corr: CorrectionNet,
                 proxy: PerceptualProxy, cfg):
        self.graph = graph
        self.vq = vq
        self.cont = cont
        self.corr = corr
        self.proxy = proxy
        self.cfg = cfg
        self._frozen_digest = None

    def frozen_digest(self) -> str:
        h = [self.graph.digest(p) for p in ("vq.", "cont.", "pred.", "proxy.")]
        return "".join(h)

    def train_step(self, batch: np.ndarray, opt: ad.Adam, step: int) -> dict:
        if self._frozen_digest is None:
            self._frozen_digest = self.frozen_digest()
        batch = np.asarray(batch, dtype=np.float64)
        vq_lat = np.stack([self.vq.encoder.forward(ad.Tensor(img[None])).data[0] for img in batch])
        vq_lat = np.stack([dequantize(quantize_to_indices(lat, self.vq.codebook), self.vq.codebook)
                           for lat in vq_lat])
        cont_lat = np.stack([self.cont.decoded_latent(img) for img in batch])
        x = ad.Tensor(batch)
        xhat = _fused_graph(self.vq, self.corr, ad.Tensor(vq_lat), ad.Tensor(cont_lat))
        loss = pixel_loss(x, xhat, self.cfg.w1, self.cfg.w2, self.proxy)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite bridge loss at step {step}")
        self.graph.zero_grad()
        ad.backward(loss)
        opt.step()
        if step % 100 == 0 and self.frozen_digest() != self._frozen_digest:
            raise InvariantViolation(f"frozen parameters changed during stage 3 (step {step})")
        return {"pixel": loss.item()}
