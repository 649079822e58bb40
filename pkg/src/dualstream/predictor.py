"""Masked-token predictor: encoder-decoder transformer with cross-attention
guidance from the recovered continuous latent.

The encoder sees only kept-token embeddings; the decoder sees the full
256-token sequence with a learned mask embedding at masked positions, and
each decoder block applies self-attention, cross-attention over the guidance
memory, then an MLP. Inference is one forward pass with argmax (lowest index
wins ties); kept positions are copied verbatim and never predicted.
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DimensionError
from .masking import GRID, MaskedIndexMap, MaskSchedule, apply_mask

log = logging.getLogger(__name__)


class _Affine:
    """LayerNorm gain/bias pair applied after the normalization op."""

    def __init__(self, graph, name, width):
        self.g = graph.parameter(f"{name}.g", np.ones(width))
        self.b = graph.parameter(f"{name}.b", np.zeros(width))

    def __call__(self, x):
        return ad.add(ad.mul(ad.layer_norm(x), self.g), self.b)


class _Dense:
    def __init__(self, graph, name, rng, din, dout, scale=1.0):
        self.w = graph.parameter(f"{name}.w", rng.normal(0.0, scale / np.sqrt(din), size=(din, dout)))
        self.b = graph.parameter(f"{name}.b", np.zeros(dout))

    def __call__(self, x):
        return ad.linear(x, self.w, self.b)


class _Attention:
    def __init__(self, graph, name, rng, width, heads):
        self.heads = heads
        self.ln = _Affine(graph, f"{name}.ln", width)
        self.wq = _Dense(graph, f"{name}.wq", rng, width, width)
        self.wk = _Dense(graph, f"{name}.wk", rng, width, width)
        self.wv = _Dense(graph, f"{name}.wv", rng, width, width)
        self.wo = _Dense(graph, f"{name}.wo", rng, width, width, scale=0.5)

    def __call__(self, x, memory=None):
        h = self.ln(x)
        kv = h if memory is None else memory
        att = ad.attention(self.wq(h), self.wk(kv), self.wv(kv), self.heads)
        return ad.add(x, self.wo(att))


class _Mlp:
    def __init__(self, graph, name, rng, width, ratio):
        self.ln = _Affine(graph, f"{name}.ln", width)
        self.fc1 = _Dense(graph, f"{name}.fc1", rng, width, width * ratio)
        self.fc2 = _Dense(graph, f"{name}.fc2", rng, width * ratio, width, scale=0.5)

    def __call__(self, x):
        return ad.add(x, self.fc2(ad.gelu(self.fc1(self.ln(x)))))


class _Pos2d:
    """Learned 2-D positional table: pos[i, j] = row[i] + col[j]."""

    def __init__(self, graph, name, rng, grid, width):
        self.grid = grid
        self.row = graph.parameter(f"{name}.row", rng.normal(0.0, 0.02, size=(grid, width)))
        self.col = graph.parameter(f"{name}.col", rng.normal(0.0, 0.02, size=(grid, width)))

    def at(self, linear_positions) -> ad.Tensor:
        idx = np.asarray(linear_positions, dtype=np.int64)
        return ad.add(ad.gather_rows(self.row, idx // self.grid),
                      ad.gather_rows(self.col, idx % self.grid))


class TokenPredictor:
    """Recovers the full 16x16 index map from a masked one."""

    def __init__(self, graph, rng, cfg, prefix="pred"):
        self.cfg = cfg
        self.graph = graph
        self.n_z = cfg.n_z
        self.width = cfg.pred_width
        self.mask_token = cfg.n_z  # one extra embedding slot for masked positions
        w, heads, ratio = cfg.pred_width, cfg.pred_heads, cfg.pred_mlp_ratio
        self.tok_emb = graph.parameter(f"{prefix}.tok_emb",
                                       rng.normal(0.0, 0.02, size=(cfg.n_z + 1, w)))
        self.enc_pos = _Pos2d(graph, f"{prefix}.enc_pos", rng, GRID, w)
        self.dec_pos = _Pos2d(graph, f"{prefix}.dec_pos", rng, GRID, w)
        self.guide_proj = _Dense(graph, f"{prefix}.guide.proj", rng, cfg.cont_channels, w)
        self.guide_pos = _Pos2d(graph, f"{prefix}.guide.pos", rng, GRID, w)
        self.enc_blocks = [
            {"attn": _Attention(graph, f"{prefix}.enc{i}.attn", rng, w, heads),
             "mlp": _Mlp(graph, f"{prefix}.enc{i}.mlp", rng, w, ratio)}
            for i in range(cfg.pred_enc_blocks)]
        self.dec_blocks = [
            {"attn": _Attention(graph, f"{prefix}.dec{i}.attn", rng, w, heads),
             "cross": _Attention(graph, f"{prefix}.dec{i}.cross", rng, w, heads),
             "mlp": _Mlp(graph, f"{prefix}.dec{i}.mlp", rng, w, ratio)}
            for i in range(cfg.pred_dec_blocks)]
        self.head_ln = _Affine(graph, f"{prefix}.head.ln", w)
        self.head_fc1 = _Dense(graph, f"{prefix}.head.fc1", rng, w, w)
        self.head_fc2 = _Dense(graph, f"{prefix}.head.fc2", rng, w, cfg.n_z)
        self.trained = False
        self.predict_calls = 0

    # -- guidance ---------------------------------------------------------------

    def build_guidance(self, cont_latent: np.ndarray) -> ad.Tensor:
        """Recovered latent (f, g, g) -> 256 x width memory tokens."""
        lat = np.asarray(cont_latent, dtype=np.float64)
        if lat.ndim != 3 or lat.shape[0] != self.cfg.cont_channels:
            raise DimensionError(
                f"guidance latent {lat.shape} does not match {self.cfg.cont_channels} channels")
        up = ad.nearest_resize(ad.Tensor(lat[None]), (GRID, GRID))
        tokens = ad.transpose(ad.reshape(up, (self.cfg.cont_channels, GRID * GRID)), (1, 0))
        return ad.add(self.guide_proj(tokens), self.guide_pos.at(np.arange(GRID * GRID)))

    # -- forward ------------------------------------------------------------------

    def forward_logits(self, masked: MaskedIndexMap, guidance: ad.Tensor | None,
                       use_cross: bool = True) -> ad.Tensor:
        """Logits (256, n_z) for every grid position."""
        kept_lin = np.array([i * GRID + j for (i, j), _ in masked.kept], dtype=np.int64)
        kept_val = np.array([v for _, v in masked.kept], dtype=np.int64)

        base = ad.gather_rows(self.tok_emb, np.full(GRID * GRID, self.mask_token, dtype=np.int64))
        if kept_lin.size:
            enc = ad.add(ad.gather_rows(self.tok_emb, kept_val), self.enc_pos.at(kept_lin))
            h = ad.reshape(enc, (1, kept_lin.size, self.width))
            for blk in self.enc_blocks:
                h = blk["mlp"](blk["attn"](h))
            seq = ad.row_scatter(base, kept_lin, ad.reshape(h, (kept_lin.size, self.width)))
        else:
            seq = base  # FULL schedule: nothing for the encoder to see
        seq = ad.add(seq, self.dec_pos.at(np.arange(GRID * GRID)))

        mem = None
        if use_cross:
            if guidance is None:
                raise ConfigurationError("cross-attention requires a guidance memory")
            if guidance.data.shape != (GRID * GRID, self.width):
                raise DimensionError(
                    f"guidance memory {guidance.data.shape}, expected {(GRID * GRID, self.width)}")
            mem = ad.reshape(guidance, (1, GRID * GRID, self.width))

        h = ad.reshape(seq, (1, GRID * GRID, self.width))
        for blk in self.dec_blocks:
            h = blk["attn"](h)
            if use_cross:
                h = blk["cross"](h, memory=mem)
            h = blk["mlp"](h)
        h = ad.reshape(h, (GRID * GRID, self.width))
        return self.head_fc2(ad.gelu(self.head_fc1(self.head_ln(h))))

    def predict_full_map(self, masked: MaskedIndexMap, guidance: ad.Tensor | None) -> np.ndarray:
        """Single-pass argmax recovery of the full index map."""
        if not self.trained:
            raise ConfigurationError("token predictor has not been trained")
        out = np.zeros((GRID, GRID), dtype=np.int64)
        for (i, j), v in masked.kept:
            out[i, j] = v
        if masked.schedule is MaskSchedule.NONE:
            return out  # nothing to predict
        self.predict_calls += 1
        logits = self.forward_logits(masked, guidance).data
        masked_lin = np.flatnonzero(masked.mask.reshape(-1))
        picks = np.argmax(logits[masked_lin], axis=1)  # first max: lowest index wins
        out.reshape(-1)[masked_lin] = picks
        return out

    # -- training -----------------------------------------------------------------

    def masked_ce(self, tokens: np.ndarray, masked: MaskedIndexMap,
                  guidance: ad.Tensor | None, use_cross: bool = True):
        """Cross-entropy over masked positions only, normalized by their count.

        Returns (loss, logits) so callers can inspect kept-position gradients.
        """
        logits = self.forward_logits(masked, guidance, use_cross=use_cross)
        masked_lin = np.flatnonzero(masked.mask.reshape(-1))
        if masked_lin.size == 0:
            return None, logits
        rows = ad.gather_rows(logits, masked_lin)
        targets = tokens.reshape(-1)[masked_lin]
        return ad.cross_entropy_from_logits(rows, targets), logits

    def train_step(self, samples, opt: ad.Adam, rng, step: int,
                   use_cross: bool = True) -> dict:
        """One step over [(tokens, guidance_latent)] with a schedule drawn per
        sample from the four masking lattices."""
        losses = []
        schedules = (MaskSchedule.M1_2, MaskSchedule.M1_4, MaskSchedule.M1_9, MaskSchedule.M1_16)
        for tokens, cont_latent in samples:
            sched = schedules[int(rng.integers(0, len(schedules)))]
            masked = _mask_tokens(tokens, sched)
            guidance = self.build_guidance(cont_latent) if use_cross else None
            loss, _ = self.masked_ce(tokens, masked, guidance, use_cross=use_cross)
            if loss is None:
                log.warning("step %d: schedule %s masked nothing; sample skipped", step, sched.name)
                continue
            losses.append(loss)
        if not losses:
            return {"ce": 0.0}
        total = losses[0]
        for piece in losses[1:]:
            total = ad.add(total, piece)
        total = ad.mul(total, 1.0 / len(losses))
        self.graph.zero_grad()
        ad.backward(total)
        opt.step()
        return {"ce": total.item()}

    def masked_accuracy(self, tokens: np.ndarray, schedule: MaskSchedule,
                        cont_latent: np.ndarray) -> float:
        masked = _mask_tokens(tokens, schedule)
        pred = self.predict_full_map(masked, self.build_guidance(cont_latent))
        sel = masked.mask
        return float((pred[sel] == tokens[sel]).mean())


def _mask_tokens(tokens: np.ndarray, schedule: MaskSchedule) -> MaskedIndexMap:
    return apply_mask(np.asarray(tokens), schedule)
