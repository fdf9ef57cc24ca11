"""``leukonet`` command line.

Exit status: 0 on success, 1 when a run fails, 2 on usage or configuration
errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import experiment as ex
from .synthetic import generate_synthetic_dataset
from .tensor import ConfigurationError

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _add_run_flags(p: argparse.ArgumentParser, sweep: bool) -> None:
    p.add_argument("--manifest", help="manifest CSV (default data/manifest.csv)")
    p.add_argument("--config", help="INI file with an [experiment] section")
    p.add_argument("--out", help="output directory")
    p.add_argument("--mode", choices=ex.MODES)
    p.add_argument("--eta-all", type=float, dest="nospeclr_eta_all", help="shared LR multiplier for --mode nospeclr")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--tta-rotations", type=int)
    p.add_argument("--crop-size", type=int, help="training/evaluation crop side")
    if sweep:
        p.add_argument("--seed", type=int, dest="base_seed", help="first seed of the sweep")
        p.add_argument("--seeds", type=int, dest="n_seeds", help="number of consecutive seeds")
        p.add_argument("--jobs", type=int, help="concurrent seed runs")
    else:
        p.add_argument("--seed", type=int, dest="base_seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leukonet", description="SE-ResNeXt cell classification experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("--out", default="data")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--subjects", type=int, default=30)
    g.add_argument("--cells", type=int, default=40, help="cells per subject")
    g.add_argument("--imbalance", type=float, default=2.0, help="ALL : normal subject ratio")
    g.add_argument("--size", type=int, default=64, help="image side in pixels")
    g.add_argument("--artifact-rate", type=float, default=0.05)

    _add_run_flags(sub.add_parser("train", help="train one seed"), sweep=False)
    _add_run_flags(sub.add_parser("sweep", help="train consecutive seeds and aggregate"), sweep=True)

    a = sub.add_parser("ablate", help="compare sweeps per epoch and with a U test")
    a.add_argument("sweeps", nargs="+", help="sweep directories (one per mode, including proposal)")
    a.add_argument("--out", default="ablation")

    r = sub.add_parser("report", help="write plot-ready CSV/JSON for a run or sweep")
    r.add_argument("source", help="run or sweep directory")
    r.add_argument("--out", help="bundle directory (default <source>/report)")
    return parser


def _experiment(args) -> ex.ExperimentConfig:
    file_values = ex.read_config_file(args.config) if args.config else {}
    flags = {k: getattr(args, k, None) for k in ("manifest", "mode", "nospeclr_eta_all", "epochs", "batch_size", "tta_rotations", "crop_size", "base_seed", "n_seeds", "jobs")}
    flags["output_dir"] = args.out
    return ex.resolve_config(file_values, **flags)


def cmd_generate(args) -> int:
    manifest = generate_synthetic_dataset(
        n_subjects=args.subjects,
        cells_per_subject=args.cells,
        class_imbalance=args.imbalance,
        image_size=args.size,
        seed=args.seed,
        out_dir=args.out,
        artifact_rate=args.artifact_rate,
    )
    for split, c in manifest.counts().items():
        print(f"{split:12s} ALL {c['ALL']:5d}  normal {c['normal']:5d}")
    print(f"manifest {Path(args.out) / 'manifest.csv'} sha256 {manifest.content_hash()}")
    return EXIT_OK


def cmd_train(args) -> int:
    exp = _experiment(args)
    run_dir = Path(exp.output_dir) / f"{exp.mode}_seed{exp.base_seed:04d}" if args.out is None else Path(exp.output_dir)
    summary = ex.run_single(exp, exp.base_seed, run_dir)
    m = summary["metrics"]
    print(f"best epoch {summary['best_epoch']}  F1 {m['weighted_f1']:.4f}  acc {m['accuracy']:.4f}  -> {run_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    exp = _experiment(args)
    sweep_dir = Path(exp.output_dir) / f"sweep_{exp.mode}" if args.out is None else Path(exp.output_dir)
    result = ex.run_sweep(exp, sweep_dir)
    print(f"{'metric':20s} {'min':>8s} {'mean':>8s} {'std':>8s} {'max':>8s}")
    for metric, row in result["table"].items():
        print(f"{metric:20s} {row['min']:8.4f} {row['mean']:8.4f} {row['std']:8.4f} {row['max']:8.4f}")
    print(f"selected {result['selected']}  -> {sweep_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    report = ex.compare_sweeps(args.sweeps, args.out)
    for mode, t in report["tests"].items():
        print(
            f"proposal > {mode}: U={t['u']:g} p={t['p']:.4g} ({t['method']}), "
            f"mean F1 {t['mean_f1_proposal']:.4f} vs {t['mean_f1_ablation']:.4f}"
        )
    return EXIT_OK


def cmd_report(args) -> int:
    out = args.out or str(Path(args.source) / "report")
    for path in ex.build_report(args.source, out):
        print(path)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "sweep": cmd_sweep, "ablate": cmd_ablate, "report": cmd_report}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
