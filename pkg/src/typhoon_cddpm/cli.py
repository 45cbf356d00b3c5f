"""Command line entry point: ``typhoon-cddpm <command>`` or ``python -m typhoon_cddpm``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import h5py
import numpy as np

from . import ingestion, pipeline, runner
from .metrics import wind_magnitude


def _cmd_ingest(args):
    window = ingestion.GeoWindow.parse(args.window) if args.window else ingestion.GeoWindow()
    era5 = ingestion.read_era5_dir(args.era5_dir, window)
    sat, diag = ingestion.read_digital_typhoon(args.dt_dir, window, predicate=args.frame_predicate)
    ingestion.save_dataset(era5 + sat, args.out, window)
    print(f"wrote {len(era5)} ERA5 and {len(sat)} satellite records to {args.out} "
          f"({diag.n_skipped} unreadable frames skipped, {diag.n_outside} outside window)")


def _cmd_synth(args):
    records = ingestion.synth_dataset(args.n, args.size, args.seed)
    ingestion.save_dataset(records, args.out)
    print(f"wrote {args.n} synthetic samples to {args.out}")


def _cmd_prepare(args):
    records = ingestion.load_dataset(args.data)
    ds = pipeline.prepare_dataset(records, grid_size=args.grid_size, seed=args.seed,
                                  train_fraction=args.train_fraction)
    pipeline.save_processed(ds, args.out)
    print(f"{len(ds.train)} train / {len(ds.test)} test pairs written to {args.out}")


def _cmd_train(args):
    config = runner.load_config(args.config)
    manifest = runner.train(config)
    print(json.dumps({"status": manifest.status, "checkpoint": manifest.checkpoint,
                      "initial_loss": manifest.initial_loss, "final_loss": manifest.final_loss}))


def _cmd_evaluate(args):
    report, mismatch = runner.evaluate(args.checkpoint, args.data, args.out, seed=args.seed,
                                       n_draws=args.n_draws, mismatch_threshold=args.threshold)
    print(report.render(runner.load_checkpoint(args.checkpoint).kind))
    print(f"pixel mismatch mean: {mismatch.mean:.3f}")


def _cmd_report(args):
    result = runner.report(args.runs, args.out, samples=args.samples)
    print(result.table_txt.read_text())


def _read_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            key = "satellite" if "satellite" in z.files else z.files[0]
            return z[key]
    if path.suffix == ".h5":
        with h5py.File(path, "r") as h5:
            return np.array(h5["Infrared"][()])
    raise ValueError(f"unsupported image file {path}")


def _cmd_sample(args):
    ckpt = runner.load_checkpoint(args.checkpoint)
    img = pipeline.FieldGrid(_read_image(Path(args.input)), "satellite")
    img = pipeline.normalize(pipeline.resample(img, ckpt.grid_size), ckpt.stats)
    pred = runner.predict(ckpt, img.values[None, None], seed=args.seed, n_draws=args.n_draws)[0]
    fields = {c: pipeline.denormalize_array(pred[i], c, ckpt.stats) for i, c in enumerate(pipeline.CHANNELS)}
    fields["magnitude"] = wind_magnitude(fields["u10"], fields["v10"])
    out = Path(args.out or Path(args.input).with_suffix(".pred.npz"))
    np.savez(out, **fields)
    print(f"wrote {', '.join(fields)} to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="typhoon-cddpm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="read ERA5 + Digital Typhoon files into a dataset directory")
    s.add_argument("--era5-dir", required=True)
    s.add_argument("--dt-dir", required=True)
    s.add_argument("--window", help="lat0,lat1,lon0,lon1 (default: Taiwan +-5 deg)")
    s.add_argument("--frame-predicate", choices=("intersects", "center"), default="intersects")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_ingest)

    s = sub.add_parser("synth", help="write a synthetic vortex dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("prepare", help="clean, align, split and fit norm stats")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid-size", type=int, default=pipeline.DEFAULT_GRID)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-fraction", type=float, default=0.8)
    s.set_defaults(func=_cmd_prepare)

    s = sub.add_parser("train", help="train a model from a YAML config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="processed dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-draws", type=int, default=1)
    s.add_argument("--threshold", type=float, default=0.05, help="pixel mismatch threshold")
    s.set_defaults(func=_cmd_evaluate)

    s = sub.add_parser("report", help="comparison table and figures for several runs")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--out", default="report")
    s.add_argument("--samples", type=int, nargs="+", default=[0])
    s.set_defaults(func=_cmd_report)

    s = sub.add_parser("sample", help="predict the four fields for one satellite image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help=".npy, .npz or Digital Typhoon .h5 frame")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-draws", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_sample)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
