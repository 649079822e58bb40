"""Codebook stream: encoder, nearest-codeword quantization, pixel decoder.

Quantization computes true squared distances position by position (blocked
over positions), so it is exactly the exhaustive nearest-neighbor search with
lowest-index tie-breaking. Gradients pass through quantization with the
straight-through identity on the reconstruction path.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import CorruptStreamError, DimensionError, NumericError
from .nets import PixelDecoder, PixelEncoder


class Codebook:
    """n_z learned codeword vectors of dimension c."""

    def __init__(self, graph, rng, n_z: int, dim: int, prefix="vq.codebook"):
        self.n_z = n_z
        self.dim = dim
        self.entries = graph.parameter(prefix, rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_z, dim)))

    @property
    def data(self) -> np.ndarray:
        return self.entries.data


def quantize_to_indices(latent: np.ndarray, codebook: Codebook) -> np.ndarray:
    """argmin_k ||y_ij - C_k||^2 per grid position; ties -> smallest index."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 3 or latent.shape[0] != codebook.dim:
        raise DimensionError(
            f"latent {latent.shape} does not match codeword dim {codebook.dim}")
    c, h, w = latent.shape
    flat = latent.reshape(c, h * w).T  # (h*w, c)
    return _nearest_indices(flat, codebook.data).reshape(h, w)


def _nearest_indices(vectors: np.ndarray, entries: np.ndarray, block: int = 512) -> np.ndarray:
    out = np.empty(vectors.shape[0], dtype=np.int64)
    for start in range(0, vectors.shape[0], block):
        chunk = vectors[start:start + block]
        d2 = ((chunk[:, None, :] - entries[None, :, :]) ** 2).sum(axis=2)
        out[start:start + block] = np.argmin(d2, axis=1)
    return out


def dequantize(indices: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Codeword lookup: latent[:, i, j] = C[d_ij]."""
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= codebook.n_z):
        raise CorruptStreamError(
            f"index map holds values outside [0, {codebook.n_z})")
    h, w = indices.shape
    return codebook.data[indices.reshape(-1)].T.reshape(codebook.dim, h, w)


class VqStream:
    """Encoder + codebook + decoder with stage-1 VQ training."""

    def __init__(self, graph, rng, cfg, prefix="vq"):
        self.cfg = cfg
        self.graph = graph
        self.encoder = PixelEncoder(graph, f"{prefix}.enc", rng, cfg.enc_channels, cfg.codeword_dim)
        self.codebook = Codebook(graph, rng, cfg.n_z, cfg.codeword_dim, prefix=f"{prefix}.codebook")
        self.decoder = PixelDecoder(graph, f"{prefix}.dec", rng, cfg.codeword_dim, cfg.dec_channels)
        self._unused_steps = np.zeros(cfg.n_z, dtype=np.int64)

    # -- inference -----------------------------------------------------------

    def vq_encode(self, image: np.ndarray) -> np.ndarray:
        """(3, tile, tile) image in [-1, 1] -> latent (c, tile/16, tile/16)."""
        image = np.asarray(image, dtype=np.float64)
        t = self.cfg.tile
        if image.shape != (3, t, t):
            raise DimensionError(f"expected a (3, {t}, {t}) tile, got {image.shape}")
        return self.encoder.forward(ad.Tensor(image[None])).data[0]

    def encode_to_indices(self, image: np.ndarray) -> np.ndarray:
        return quantize_to_indices(self.vq_encode(image), self.codebook)

    def decode_graph(self, latent: ad.Tensor, injections=None):
        """Shared decode path; `injections` come from the correction network."""
        return self.decoder.forward(latent, injections)

    def vq_decode(self, latent: np.ndarray):
        """Latent (c, h, w) -> (image (3, 16h, 16w), 4 stage feature maps)."""
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim != 3 or latent.shape[0] != self.cfg.codeword_dim:
            raise DimensionError(
                f"latent {latent.shape} does not match codeword dim {self.cfg.codeword_dim}")
        out, feats = self.decode_graph(ad.Tensor(latent[None]))
        return out.data[0], [f.data[0] for f in feats]

    # -- training ------------------------------------------------------------

    def train_step(self, batch: np.ndarray, opt: ad.Adam, rng, step: int) -> dict:
        """One stage-1 step: L1 + codebook + commitment losses with the
        straight-through estimator on the reconstruction path."""
        x = ad.Tensor(np.asarray(batch, dtype=np.float64))
        b = x.data.shape[0]
        y = self.encoder.forward(x)  # (B, c, h, w)
        c = y.data.shape[1]
        y_flat = ad.reshape(ad.transpose(y, (0, 2, 3, 1)), (-1, c))
        idx = _nearest_indices(y_flat.data, self.codebook.data)
        cvecs = ad.gather_rows(self.codebook.entries, idx)

        codebook_loss = ad.mse_loss(cvecs, ad.stop_gradient(y_flat))
        commit_loss = ad.mse_loss(y_flat, ad.stop_gradient(cvecs))
        yq = ad.straight_through(y_flat, cvecs)
        grid = ad.transpose(ad.reshape(yq, (b, y.data.shape[2], y.data.shape[3], c)), (0, 3, 1, 2))
        recon, _ = self.decode_graph(grid)
        recon_loss = ad.l1_loss(recon, x)
        total = ad.add(recon_loss, ad.add(codebook_loss, ad.mul(commit_loss, self.cfg.commit_beta)))
        if not np.isfinite(total.data):
            raise NumericError(f"non-finite VQ loss at step {step}")

        self.graph.zero_grad()
        ad.backward(total)
        opt.step()
        self._refresh_codebook(idx, y_flat.data, rng)
        if not np.all(np.isfinite(self.codebook.data)):
            raise NumericError(f"codebook became non-finite at step {step}")
        return {"total": total.item(), "l1": recon_loss.item(),
                "codebook": codebook_loss.item(), "commit": commit_loss.item()}

    def _refresh_codebook(self, used_idx, latents, rng) -> None:
        # codewords unused for cfg.dead_code_steps consecutive steps are
        # re-seeded to a random latent vector from the current batch
        self._unused_steps += 1
        self._unused_steps[np.unique(used_idx)] = 0
        dead = np.flatnonzero(self._unused_steps >= self.cfg.dead_code_steps)
        for k in dead:
            row = int(rng.integers(0, latents.shape[0]))
            self.codebook.entries.data[k] = latents[row]
            self._unused_steps[k] = 0
