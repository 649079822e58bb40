"""Three-stage training, tiled encode/decode, and the RD evaluation harness.

Stage 1 trains the codebook and continuous streams independently; stage 2
trains the token predictor against frozen stage-1 features (brief unguided
warm start, then cross-attention/MLP/logit layers only); stage 3 trains the
correction decoder with everything else frozen. Freeze discipline is verified
by parameter hashing after every stage.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import bitstream as bs
from .bridge import BridgeTrainer, fused_decode
from .config import PipelineConfig
from .errors import ConfigurationError, InvariantViolation
from .imageio import psnr_8bit
from .masking import (
    MaskSchedule,
    apply_mask,
    calibrate,
    complexity_score,
    masked_from_indices,
    select_schedule,
)
from .model import CodecModel
from .vq import dequantize, quantize_to_indices

log = logging.getLogger(__name__)


def _stage2_trainable(name: str) -> bool:
    """Guided-phase trainable set: cross-attention modules, decoder MLPs, the
    output-logit MLP, and the guidance projection. Self-attention, token and
    positional embeddings, and all encoder blocks stay frozen."""
    if not name.startswith("pred."):
        return False
    if name.startswith("pred.head.") or name.startswith("pred.guide."):
        return True
    if name.startswith("pred.dec") and (".cross." in name or ".mlp." in name):
        return True
    return False


@dataclass
class TrainReport:
    stage_seconds: dict = field(default_factory=dict)
    digests: dict = field(default_factory=dict)
    stage1_l1_init: float = 0.0
    stage1_l1_final: float = 0.0
    cont_rate_bpp: float = 0.0
    stage2_accuracy_m14: float = 0.0
    stage2_chance: float = 0.0
    stage3_vq_l1: float = 0.0
    stage3_fused_l1: float = 0.0
    stage3_win_fraction: float = 0.0
    total_seconds: float = 0.0
    process_seconds: float = 0.0


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _random_crop_batch(tiles, rng, batch, crop):
    out = []
    for _ in range(batch):
        t = tiles[int(rng.integers(0, len(tiles)))]
        size = t.shape[1]
        if crop >= size:
            out.append(t)
            continue
        # keep crops aligned to the 16-pixel token grid so latents stay exact
        oy = int(rng.integers(0, (size - crop) // 16 + 1)) * 16
        ox = int(rng.integers(0, (size - crop) // 16 + 1)) * 16
        out.append(t[:, oy:oy + crop, ox:ox + crop])
    return np.stack(out)


def vq_reconstruction_l1(model: CodecModel, tiles) -> float:
    """Mean per-tile L1 of quantized encode -> decode, the stage-1 metric."""
    total = 0.0
    for t in tiles:
        lat = model.vq.vq_encode(t)
        rec = dequantize(quantize_to_indices(lat, model.vq.codebook), model.vq.codebook)
        img, _ = model.vq.vq_decode(rec)
        total += float(np.abs(img - t).mean())
    return total / len(tiles)


def train_all(corpus, cfg: PipelineConfig, out_dir) -> tuple[CodecModel, TrainReport]:
    """Run the full three-stage pipeline; emits per-stage checkpoints and
    loss-curve CSVs under `out_dir`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not corpus:
        raise ConfigurationError("training corpus is empty")
    t_wall = time.perf_counter()
    t_cpu = time.process_time()

    model = CodecModel(cfg)
    report = TrainReport()

    split_rng = np.random.default_rng(cfg.seed + 1)
    order = split_rng.permutation(len(corpus))
    n_hold = max(1, int(round(len(corpus) * cfg.holdout_fraction)))
    holdout = [corpus[i] for i in order[:n_hold]]
    train = [corpus[i] for i in order[n_hold:]] or holdout
    probe = train[:min(8, len(train))]  # fixed tiles for stage metrics

    model.stats = calibrate(train)

    # -- stage 1: codebook stream ------------------------------------------------
    t0 = time.perf_counter()
    model.graph.set_trainable(lambda n: n.startswith("vq."))
    opt = ad.Adam(model.graph, lr=cfg.vq_lr, select=lambda n: n.startswith("vq."))
    report.stage1_l1_init = vq_reconstruction_l1(model, probe)
    rows = []
    for step in range(cfg.vq_steps):
        batch = _random_crop_batch(train, model.rng, cfg.vq_batch, cfg.vq_crop)
        rep = model.vq.train_step(batch, opt, model.rng, step)
        rows.append((step, rep["total"], rep["l1"], rep["codebook"]))
    _write_csv(out / "stage1_vq_loss.csv", ("step", "total", "l1", "codebook"), rows)
    report.stage1_l1_final = vq_reconstruction_l1(model, probe)

    # -- stage 1: continuous stream ------------------------------------------------
    model.graph.set_trainable(lambda n: n.startswith("cont."))
    opt = ad.Adam(model.graph, lr=cfg.cont_lr, select=lambda n: n.startswith("cont."))
    rows = []
    for step in range(cfg.cont_steps):
        batch = _random_crop_batch(train, model.rng, cfg.cont_batch, cfg.tile)
        rep = model.cont.train_step(batch, opt, model.rng._rng, step)
        rows.append((step, rep["total"], rep["rate_bpp"], rep["dist"]))
    _write_csv(out / "stage1_cont_loss.csv", ("step", "total", "rate_bpp", "dist"), rows)
    report.cont_rate_bpp = float(np.mean(
        [model.cont.cont_encode(t)[1].nbits / t.shape[1] ** 2 for t in holdout]))
    model.mark_stage_done(1)
    model.save(out / "stage1")
    report.stage_seconds["stage1"] = time.perf_counter() - t0
    report.digests["after_stage1"] = model.digests()

    # -- stage 2: token predictor ------------------------------------------------
    t0 = time.perf_counter()
    samples = [(model.vq.encode_to_indices(t), model.cont.decoded_latent(t)) for t in train]
    hold_samples = [(model.vq.encode_to_indices(t), model.cont.decoded_latent(t))
                    for t in holdout]

    model.graph.set_trainable(lambda n: n.startswith("pred."))
    opt = ad.Adam(model.graph, lr=cfg.pred_lr, select=lambda n: n.startswith("pred."))
    rows = []
    for step in range(cfg.pred_warmup_steps):
        picks = [samples[int(model.rng.integers(0, len(samples)))] for _ in range(cfg.pred_batch)]
        rep = model.predictor.train_step(picks, opt, model.rng, step, use_cross=False)
        rows.append((step, "warmup", rep["ce"]))

    model.graph.set_trainable(_stage2_trainable)
    opt = ad.Adam(model.graph, lr=cfg.pred_lr, select=_stage2_trainable)
    for step in range(cfg.pred_steps):
        picks = [samples[int(model.rng.integers(0, len(samples)))] for _ in range(cfg.pred_batch)]
        rep = model.predictor.train_step(picks, opt, model.rng, step)
        rows.append((cfg.pred_warmup_steps + step, "guided", rep["ce"]))
    _write_csv(out / "stage2_predictor_loss.csv", ("step", "phase", "ce"), rows)

    model.mark_stage_done(2)
    accs = [model.predictor.masked_accuracy(tok, MaskSchedule.M1_4, lat)
            for tok, lat in hold_samples]
    report.stage2_accuracy_m14 = float(np.mean(accs))
    report.stage2_chance = 1.0 / cfg.n_z
    model.save(out / "stage2")
    report.stage_seconds["stage2"] = time.perf_counter() - t0
    report.digests["after_stage2"] = model.digests()
    _check_frozen(report.digests, "after_stage1", "after_stage2", ("vq.", "cont.", "corr.", "proxy."))

    # -- stage 3: correction decoder ------------------------------------------------
    t0 = time.perf_counter()
    model.corr.copy_from_vq_decoder(model.graph)
    model.graph.set_trainable(lambda n: n.startswith("corr."))
    opt = ad.Adam(model.graph, lr=cfg.bridge_lr, select=lambda n: n.startswith("corr."))
    trainer = BridgeTrainer(model.graph, model.vq, model.cont, model.corr, model.proxy, cfg)
    rows = []
    for step in range(cfg.bridge_steps):
        batch = _random_crop_batch(train, model.rng, cfg.bridge_batch, cfg.bridge_crop)
        rep = trainer.train_step(batch, opt, step)
        rows.append((step, rep["pixel"]))
    _write_csv(out / "stage3_bridge_loss.csv", ("step", "pixel"), rows)

    model.mark_stage_done(3)
    vq_l1, fused_l1, wins = paired_decode_l1(model, holdout)
    report.stage3_vq_l1 = vq_l1
    report.stage3_fused_l1 = fused_l1
    report.stage3_win_fraction = wins
    model.save(out / "final")
    report.stage_seconds["stage3"] = time.perf_counter() - t0
    report.digests["after_stage3"] = model.digests()
    _check_frozen(report.digests, "after_stage2", "after_stage3", ("vq.", "cont.", "pred.", "proxy."))

    report.total_seconds = time.perf_counter() - t_wall
    report.process_seconds = time.process_time() - t_cpu
    _write_csv(out / "train_report.csv", ("key", "value"),
               sorted((k, v) for k, v in _report_rows(report)))
    return model, report


def _report_rows(report: TrainReport):
    for key, value in vars(report).items():
        if isinstance(value, dict):
            continue
        yield key, value
    for stage, secs in report.stage_seconds.items():
        yield f"seconds_{stage}", secs


def _check_frozen(digests, before_key, after_key, prefixes):
    for p in prefixes:
        if digests[before_key][p] != digests[after_key][p]:
            raise InvariantViolation(
                f"{p} parameters changed between {before_key} and {after_key}")


def paired_decode_l1(model: CodecModel, tiles) -> tuple[float, float, float]:
    """Held-out comparison of plain VQ decode vs correction-fused decode."""
    vq_losses, fused_losses = [], []
    for t in tiles:
        lat = model.vq.vq_encode(t)
        rec = dequantize(quantize_to_indices(lat, model.vq.codebook), model.vq.codebook)
        plain, _ = model.vq.vq_decode(rec)
        cont_lat = model.cont.decoded_latent(t)
        fused = fused_decode(model.vq, model.corr, rec, cont_lat).image
        vq_losses.append(float(np.abs(plain - t).mean()))
        fused_losses.append(float(np.abs(fused - t).mean()))
    vq_l1 = float(np.mean(vq_losses))
    fused_l1 = float(np.mean(fused_losses))
    wins = float(np.mean([f <= v for v, f in zip(vq_losses, fused_losses)]))
    return vq_l1, fused_l1, wins


# ---------------------------------------------------------------------------
# tiled encode / decode
# ---------------------------------------------------------------------------

def _pad_to_tiles(image: np.ndarray, tile: int) -> np.ndarray:
    _, h, w = image.shape
    ph = (-h) % tile
    pw = (-w) % tile
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return image


def encode_image(image: np.ndarray, model: CodecModel, policy: str = "1_4",
                 with_cont: bool = True, coded_indices: bool = False):
    """Tile, encode both streams, and assemble the container.

    Returns (container bytes, per-tile info dicts). `policy` is one of
    none/1_2/1_4/1_9/1_16/full or 'auto' for complexity-aware selection.
    """
    model.require_trained()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigurationError(f"expected a (3, H, W) image, got {image.shape}")
    if policy == "auto" and model.stats is None:
        raise ConfigurationError("auto policy requires calibrated complexity stats")
    cfg = model.cfg
    h, w = image.shape[1], image.shape[2]
    padded = _pad_to_tiles(image, cfg.tile)
    rows_n = padded.shape[1] // cfg.tile
    cols_n = padded.shape[2] // cfg.tile

    tiles, infos = [], []
    for r in range(rows_n):
        for c in range(cols_n):
            region = padded[:, r * cfg.tile:(r + 1) * cfg.tile, c * cfg.tile:(c + 1) * cfg.tile]
            indices = model.vq.encode_to_indices(region)
            if policy == "auto":
                score = complexity_score(region, model.stats)
                schedule = select_schedule(score)
            else:
                score = float("nan")
                schedule = MaskSchedule.from_policy(policy)
            masked = apply_mask(indices, schedule)
            if coded_indices:
                index_bits = _rc_pack_indices(masked, cfg.n_z)
            else:
                index_bits = bs.pack_indices(masked, cfg.n_z)
            if with_cont:
                _, cont_bits, cinfo = model.cont.cont_encode(region)
            else:
                cont_bits, cinfo = bs.BitString.empty(), {"saturated": 0, "payload_bits": 0}
            tiles.append(bs.TileRecord(schedule, index_bits, cont_bits))
            infos.append({"row": r, "col": c, "schedule": schedule.policy_name,
                          "score": score, **cinfo})
    version = bs.VERSION_RC_INDEX if coded_indices else bs.VERSION_PACKED
    container = bs.BitstreamContainer(w, h, cfg.tile, cfg.n_z, tiles, version=version)
    return bs.container_write(container), infos


def _rc_pack_indices(masked, n_z: int) -> bs.BitString:
    enc = bs.RangeEncoder()
    m = bs.AdaptiveModel(n_z)
    for _, idx in masked.kept:
        enc.encode(int(idx), m.cdf())
        m.update(int(idx))
    payload = enc.finish()
    return bs.BitString(payload, len(payload) * 8)


def _rc_unpack_indices(bits: bs.BitString, count: int, n_z: int) -> list[int]:
    dec = bs.RangeDecoder(bits.data)
    m = bs.AdaptiveModel(n_z)
    out = []
    for _ in range(count):
        s = dec.decode(m.cdf())
        m.update(s)
        out.append(s)
    return out


def decode_image(blob: bytes, model: CodecModel) -> np.ndarray:
    """Parse the container and reconstruct the image; deterministic."""
    model.require_trained()
    cfg = model.cfg
    container = bs.container_read(blob)
    if container.n_z != cfg.n_z or container.tile != cfg.tile:
        raise ConfigurationError(
            f"container (n_z={container.n_z}, tile={container.tile}) does not match "
            f"model config (n_z={cfg.n_z}, tile={cfg.tile})")
    rows_n, cols_n = container.tile_grid()
    canvas = np.zeros((3, rows_n * cfg.tile, cols_n * cfg.tile))
    grid = cfg.tile // 32  # continuous latent side per tile
    for k, rec in enumerate(container.tiles):
        r, c = divmod(k, cols_n)
        if rec.cont_bits.nbits:
            cont_lat = model.cont.cont_decode(rec.cont_bits)
        else:
            cont_lat = np.zeros((cfg.cont_channels, grid, grid))
        if container.version == bs.VERSION_RC_INDEX:
            values = _rc_unpack_indices(rec.index_bits, rec.schedule.kept_count(16), cfg.n_z)
        else:
            values = bs.unpack_indices(rec.index_bits, rec.schedule.kept_count(16), cfg.n_z)
        masked = masked_from_indices(values, rec.schedule)
        if rec.schedule is MaskSchedule.NONE:
            full = np.zeros((16, 16), dtype=np.int64)
            for (i, j), v in masked.kept:
                full[i, j] = v
        else:
            guidance = model.predictor.build_guidance(cont_lat)
            full = model.predictor.predict_full_map(masked, guidance)
        vq_lat = dequantize(full, model.vq.codebook)
        tile_img = fused_decode(model.vq, model.corr, vq_lat, cont_lat).image
        canvas[:, r * cfg.tile:(r + 1) * cfg.tile, c * cfg.tile:(c + 1) * cfg.tile] = tile_img
    return canvas[:, :container.height, :container.width]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class RDPoint:
    image_id: str
    policy: str
    bpp: float
    psnr: float
    proxy_distance: float
    bpp_header: float
    bpp_index: float
    bpp_continuous: float
    saturated: int


def proxy_distance(model: CodecModel, a: np.ndarray, b: np.ndarray) -> float:
    fa = model.proxy.features(ad.Tensor(a[None])).data
    fb = model.proxy.features(ad.Tensor(b[None])).data
    return float(np.mean((fa - fb) ** 2))


def evaluate(corpus, model: CodecModel, policies, csv_path=None,
             schedule_map_path=None) -> list[RDPoint]:
    """Encode/decode every image under every policy; rows plus per-policy
    means; optionally dumps the per-tile schedule map (complexity analogue)."""
    points = []
    map_rows = []
    for img_id, image in corpus:
        for policy in policies:
            blob, infos = encode_image(image, model, policy=policy)
            recon = decode_image(blob, model)
            container = bs.container_read(blob)
            total, parts = bs.bpp(container)
            points.append(RDPoint(
                image_id=img_id, policy=policy, bpp=total,
                psnr=psnr_8bit(image, recon),
                proxy_distance=proxy_distance(model, image, recon),
                bpp_header=parts["header"], bpp_index=parts["index"],
                bpp_continuous=parts["continuous"],
                saturated=sum(i["saturated"] for i in infos)))
            for info in infos:
                map_rows.append((img_id, policy, info["row"], info["col"],
                                 info["schedule"], info["score"]))
    if csv_path:
        rows = [(p.image_id, p.policy, f"{p.bpp:.8f}", f"{p.psnr:.4f}",
                 f"{p.proxy_distance:.8f}", f"{p.bpp_header:.8f}", f"{p.bpp_index:.8f}",
                 f"{p.bpp_continuous:.8f}", p.saturated) for p in points]
        for policy in policies:
            sel = [p for p in points if p.policy == policy]
            rows.append(("MEAN", policy, f"{np.mean([p.bpp for p in sel]):.8f}",
                         f"{np.mean([p.psnr for p in sel]):.4f}",
                         f"{np.mean([p.proxy_distance for p in sel]):.8f}",
                         f"{np.mean([p.bpp_header for p in sel]):.8f}",
                         f"{np.mean([p.bpp_index for p in sel]):.8f}",
                         f"{np.mean([p.bpp_continuous for p in sel]):.8f}",
                         sum(p.saturated for p in sel)))
        _write_csv(csv_path, ("image", "policy", "bpp", "psnr", "proxy_distance",
                              "bpp_header", "bpp_index", "bpp_continuous", "saturated"), rows)
    if schedule_map_path:
        _write_csv(schedule_map_path,
                   ("image", "policy", "tile_row", "tile_col", "schedule", "score"), map_rows)
    return points
