"""Command-line entry points: train, compress, decompress, eval, report."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import metrics
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .codec import CodecConfig, model_init
from .entropy import EntropyModel
from .pointcloud import PlyError, PointCloud, read_ply, write_ply
from .rangecoder import BitstreamError
from .training import TrainConfig, TrainingDiverged, synth_dataset, train, write_log_csv

log = logging.getLogger("pcac")


def _codec_config(args) -> CodecConfig:
    base = CodecConfig()
    return CodecConfig(
        num_scales=args.scales or base.num_scales,
        sample_ratio=args.ratio or base.sample_ratio,
        eca_layers_per_block=args.layers or base.eca_layers_per_block,
        channels=args.channels or base.channels,
        k_neighbors=args.k or base.k_neighbors,
        latent_channels=args.latent_channels or base.latent_channels,
        residual=not args.no_residual,
    )


def cmd_train(args) -> int:
    cfg = _codec_config(args)
    tcfg = TrainConfig(lam=args.lam, steps=args.steps, lr=args.lr, batch=args.batch, seed=args.seed)
    dataset = synth_dataset(args.patches, args.seed)
    codec = model_init(cfg, args.seed)
    em = EntropyModel(cfg.latent_channels, seed=args.seed)

    def progress(row):
        if row["step"] % 50 == 0 or row["step"] == tcfg.steps:
            log.info("step %d loss %.4f distortion %.4f est_bpp %.4f",
                     row["step"], row["loss"], row["distortion"], row["est_bpp"])

    codec, em, rows = train(codec, em, dataset, tcfg, progress=progress)
    meta = {"lambda": args.lam, "steps": args.steps, "seed": args.seed, "patches": args.patches}
    save_checkpoint(args.output, codec, em, meta)
    if args.log:
        write_log_csv(rows, args.log)
    print(f"saved {args.output} (final loss {rows[-1]['loss']:.4f})")
    return 0


def cmd_compress(args) -> int:
    from .pipeline import compress_cloud

    codec, em, _ = load_checkpoint(args.model)
    pc = read_ply(args.input)
    data = compress_cloud(pc, codec, em, seed=args.seed, jobs=args.jobs)
    with open(args.output, "wb") as fh:
        fh.write(data)
    print(f"{len(pc)} points -> {len(data)} bytes, {metrics.bpp(data, len(pc)):.6f} bpp")
    return 0


def cmd_decompress(args) -> int:
    from .pipeline import decompress_cloud

    codec, em, _ = load_checkpoint(args.model)
    geometry = read_ply(args.geometry)
    with open(args.input, "rb") as fh:
        data = fh.read()
    rec = decompress_cloud(data, geometry.positions, codec, em, jobs=args.jobs)
    write_ply(rec.to_rgb(), args.output, format=args.format)
    print(f"wrote {args.output} ({len(rec)} points)")
    return 0


def cmd_eval(args) -> int:
    ref = read_ply(args.reference).to_yuv()
    rec = read_ply(args.input).to_yuv()
    if len(ref) != len(rec) or not np.array_equal(ref.positions, rec.positions):
        raise ValueError("reference and reconstruction must share geometry row by row")
    y = metrics.psnr(ref.colors[:, 0], rec.colors[:, 0])
    yuv = metrics.psnr_yuv(ref.colors, rec.colors)
    rate = float("nan")
    if args.stream:
        with open(args.stream, "rb") as fh:
            rate = metrics.bpp(fh.read(), len(ref))
    print(f"bpp {rate:.6f} psnr_y {y:.4f} psnr_yuv {yuv:.4f}")
    if args.csv:
        new = not os.path.exists(args.csv)
        with open(args.csv, "a") as fh:
            if new:
                fh.write(",".join(metrics.CSV_FIELDS) + "\n")
            fh.write(f"{args.name},{args.lam!r},{rate!r},{y!r},{yuv!r}\n")
    return 0


def cmd_report(args) -> int:
    curves = [metrics.read_curve_csv(p) for p in args.input]
    files = metrics.rd_report(curves, args.output, title=args.title)
    for f in files:
        print(f)
    if args.anchor:
        anchor = metrics.read_curve_csv(args.anchor)
        for c in curves:
            br, dp = metrics.bd_metrics(anchor, c)
            flag = "  (abnormal BD-BR)" if metrics.bd_rate_abnormal(br) else ""
            print(f"{c.label} vs {anchor.label}: BD-BR {br:+.2f}% BD-PSNR {dp:+.4f} dB{flag}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcac", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on synthetic patches")
    t.add_argument("--lambda", dest="lam", type=float, required=True)
    t.add_argument("--steps", type=int, default=5000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--output", required=True, help="checkpoint path")
    t.add_argument("--patches", type=int, default=512)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--log", help="CSV training log path")
    for flag in ("--k", "--ratio", "--scales", "--layers", "--channels", "--latent-channels"):
        t.add_argument(flag, type=int)
    t.add_argument("--no-residual", action="store_true", help="plain ECA stacks without skip connections")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compress", help="PLY -> .a2c stream")
    c.add_argument("--model", required=True)
    c.add_argument("--input", required=True)
    c.add_argument("--output", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help=".a2c stream + geometry PLY -> PLY")
    d.add_argument("--model", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--geometry", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--format", choices=("ascii", "binary"), default="binary")
    d.add_argument("--jobs", type=int, default=1)
    d.set_defaults(func=cmd_decompress)

    e = sub.add_parser("eval", help="PSNR / bpp of a reconstruction")
    e.add_argument("--reference", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--stream")
    e.add_argument("--csv", help="append an RD row to this CSV")
    e.add_argument("--name", default="run")
    e.add_argument("--lambda", dest="lam", type=float, default=float("nan"))
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="RD CSVs -> report files and BD metrics")
    r.add_argument("--input", nargs="+", required=True)
    r.add_argument("--output", required=True)
    r.add_argument("--anchor")
    r.add_argument("--title", default="rd")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    level = os.environ.get("A2C_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CheckpointError, BitstreamError, PlyError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
