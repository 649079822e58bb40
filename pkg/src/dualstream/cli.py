"""Command-line interface: train / encode / decode / eval / calibrate."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .errors import DualStreamError
from .imageio import load_image, save_image
from .masking import calibrate
from .model import CodecModel
from .pipeline import decode_image, encode_image, evaluate, train_all

POLICIES = ("none", "1_2", "1_4", "1_9", "1_16", "full", "auto")

log = logging.getLogger("dualstream")


def _corpus_paths(corpus_dir: Path) -> list[Path]:
    exts = (".png", ".ppm", ".pnm")
    paths = sorted(p for p in corpus_dir.iterdir() if p.suffix.lower() in exts)
    if not paths:
        raise DualStreamError(f"no PNG/PPM images found in {corpus_dir}")
    return paths


def _corpus_tiles(corpus_dir: Path, tile: int) -> list[np.ndarray]:
    """Cut every corpus image into tile-sized training tiles (edge padded)."""
    tiles = []
    for path in _corpus_paths(corpus_dir):
        img = load_image(path)
        ph = (-img.shape[1]) % tile
        pw = (-img.shape[2]) % tile
        if ph or pw:
            img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
        for r in range(img.shape[1] // tile):
            for c in range(img.shape[2] // tile):
                tiles.append(img[:, r * tile:(r + 1) * tile, c * tile:(c + 1) * tile])
    return tiles


def cmd_train(args) -> int:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig.toy(seed=args.seed)
    if args.config is None:
        log.info("no --config given; using the toy preset (n_z=%d)", cfg.n_z)
    tiles = _corpus_tiles(Path(args.corpus), cfg.tile)
    log.info("training on %d tiles of %dx%d", len(tiles), cfg.tile, cfg.tile)
    model, report = train_all(tiles, cfg, args.out)
    log.info("stage 1 L1 %.4f -> %.4f | cont %.4f bpp | stage 2 acc %.3f | "
             "stage 3 L1 vq %.4f fused %.4f | %.1f s wall",
             report.stage1_l1_init, report.stage1_l1_final, report.cont_rate_bpp,
             report.stage2_accuracy_m14, report.stage3_vq_l1, report.stage3_fused_l1,
             report.total_seconds)
    log.info("final model written to %s", Path(args.out) / "final")
    return 0


def cmd_encode(args) -> int:
    model = CodecModel.load(args.model)
    image = load_image(getattr(args, "in"))
    blob, infos = encode_image(image, model, policy=args.policy,
                               with_cont=not args.no_cont,
                               coded_indices=args.coded_indices)
    Path(args.out).write_bytes(blob)
    pixels = image.shape[1] * image.shape[2]
    log.info("wrote %d bytes (%.6f bpp) across %d tiles to %s",
             len(blob), len(blob) * 8 / pixels, len(infos), args.out)
    return 0


def cmd_decode(args) -> int:
    model = CodecModel.load(args.model)
    blob = Path(getattr(args, "in")).read_bytes()
    image = decode_image(blob, model)
    save_image(image, args.out)
    log.info("decoded %dx%d image to %s", image.shape[2], image.shape[1], args.out)
    return 0


def cmd_eval(args) -> int:
    model = CodecModel.load(args.model)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    for p in policies:
        if p not in POLICIES:
            raise DualStreamError(f"unknown policy {p!r}; choose from {POLICIES}")
    corpus = [(path.name, load_image(path)) for path in _corpus_paths(Path(args.corpus))]
    points = evaluate(corpus, model, policies, csv_path=args.csv,
                      schedule_map_path=args.schedule_map)
    log.info("wrote %d RD points to %s", len(points), args.csv)
    return 0


def cmd_calibrate(args) -> int:
    tile = args.tile
    tiles = _corpus_tiles(Path(args.corpus), tile)
    stats = calibrate(tiles)
    stats.save(args.out)
    log.info("calibrated complexity stats over %d tiles -> %s", len(tiles), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualstream",
                                description="Dual-stream masked-codebook image codec")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the three-stage training pipeline")
    t.add_argument("--corpus", required=True, help="directory of PNG/PPM images")
    t.add_argument("--config", default=None, help="key=value config file (default: toy preset)")
    t.add_argument("--out", required=True, help="output directory for checkpoints and CSVs")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("encode", help="compress one image")
    e.add_argument("--model", required=True, help="trained model directory")
    e.add_argument("--policy", choices=POLICIES, default="1_4")
    e.add_argument("--in", required=True, help="input PNG/PPM image")
    e.add_argument("--out", required=True, help="output container path")
    e.add_argument("--no-cont", action="store_true",
                   help="omit the continuous substream (degenerate low-rate mode)")
    e.add_argument("--coded-indices", action="store_true",
                   help="range-code indices adaptively instead of fixed-width packing")
    e.set_defaults(fn=cmd_encode)

    d = sub.add_parser("decode", help="decompress a container")
    d.add_argument("--model", required=True)
    d.add_argument("--in", required=True, help="input container path")
    d.add_argument("--out", required=True, help="output PNG/PPM image")
    d.set_defaults(fn=cmd_decode)

    ev = sub.add_parser("eval", help="rate-distortion evaluation over a corpus")
    ev.add_argument("--model", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--policies", default="1_4", help="comma-separated policy list")
    ev.add_argument("--csv", required=True, help="output CSV of RD points")
    ev.add_argument("--schedule-map", default=None, help="optional per-tile schedule CSV")
    ev.set_defaults(fn=cmd_eval)

    c = sub.add_parser("calibrate", help="compute complexity stats over a corpus")
    c.add_argument("--corpus", required=True)
    c.add_argument("--out", required=True, help="output stats file")
    c.add_argument("--tile", type=int, default=256)
    c.set_defaults(fn=cmd_calibrate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except DualStreamError as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
