"""Run orchestration: single runs, seed sweeps, ablation comparisons and
plot-ready report bundles.

Directory layout produced here::

    <run>/config.json          effective configuration, seed, manifest hash
    <run>/history.csv          per-epoch train loss and validation metrics
    <run>/checkpoints/epochNN.ckpt
    <run>/best.json            selected epoch, its checkpoint hash, metrics
    <sweep>/seed_NNNN/         one run directory per seed
    <sweep>/sweep.json         per-seed best scores and the summary table
    <sweep>/table.csv          min/mean/std/max per metric

Every file is written deterministically (sorted keys, ``repr`` floats, no
timestamps) so that identical inputs give byte-identical outputs.
"""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .augment import AugmentConfig
from .checkpoint import load_checkpoint, model_from_checkpoint
from .data import Manifest, load_manifest
from .metrics import EvalReport, write_subject_csv
from .model import ModelConfig, build_model
from .stats import mann_whitney_u_one_sided
from .tensor import ConfigurationError
from .training import LRSchedule, TrainConfig, class_weight, evaluate, select_best, train
from .tta import TTAConfig

logger = logging.getLogger(__name__)

MODES = ("proposal", "norot", "nospeclr")
TABLE_METRICS = EvalReport.METRICS
MAX_FAILED_FRACTION = 0.10


class SweepError(RuntimeError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    manifest: str = "data/manifest.csv"
    output_dir: str = "runs"
    mode: str = "proposal"
    n_seeds: int = 24
    base_seed: int = 0
    nospeclr_eta_all: float = 1e-4
    epochs: int = 6
    batch_size: int = 16
    tta_rotations: int = 8
    jobs: int = 1
    crop_size: Optional[int] = None  # overrides augment.crop_size when set
    model: ModelConfig = field(default_factory=ModelConfig.toy)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_seeds < 1:
            raise ConfigurationError(f"n_seeds must be >= 1, got {self.n_seeds}")
        if not self.nospeclr_eta_all > 0:
            raise ConfigurationError(f"eta_all must be positive, got {self.nospeclr_eta_all}")
        if self.jobs < 1:
            raise ConfigurationError(f"jobs must be >= 1, got {self.jobs}")

    def train_config(self, seed: int) -> TrainConfig:
        """Training configuration for ``seed`` under this mode.

        ``norot`` only changes evaluation (a single view); ``nospeclr`` gives
        every group the multiplier ``nospeclr_eta_all`` and keeps the decay.
        """
        tta = TTAConfig(n_rotations=1 if self.mode == "norot" else self.tta_rotations)
        schedule = LRSchedule.uniform(self.nospeclr_eta_all) if self.mode == "nospeclr" else LRSchedule()
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=seed,
            schedule=schedule,
            augment=replace(self.augment, crop_size=self.crop_size) if self.crop_size else self.augment,
            tta=tta,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "augment" in d:
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)


# --- config files ---------------------------------------------------------

CONFIG_SECTION = "experiment"
_CONFIG_TYPES = {
    "manifest": str,
    "output_dir": str,
    "mode": str,
    "n_seeds": int,
    "base_seed": int,
    "nospeclr_eta_all": float,
    "epochs": int,
    "batch_size": int,
    "tta_rotations": int,
    "jobs": int,
    "crop_size": int,
}


def read_config_file(path) -> Dict[str, object]:
    """Parse an INI-style file with a single ``[experiment]`` section.

    Example::

        [experiment]
        mode = nospeclr
        nospeclr_eta_all = 1e-4
        n_seeds = 8
    """
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    if not parser.has_section(CONFIG_SECTION):
        raise ConfigurationError(f"{path}: missing [{CONFIG_SECTION}] section")
    out = {}
    for key, raw in parser.items(CONFIG_SECTION):
        if key not in _CONFIG_TYPES:
            raise ConfigurationError(f"{path}: unknown key {key!r}; known keys: {sorted(_CONFIG_TYPES)}")
        try:
            out[key] = _CONFIG_TYPES[key](raw)
        except ValueError as exc:
            raise ConfigurationError(f"{path}: bad value for {key!r}: {raw!r}") from exc
    return out


def resolve_config(file_values: Optional[dict] = None, **flags) -> ExperimentConfig:
    """Flags override file values, which override defaults. ``None`` flags are ignored."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in flags.items() if v is not None})
    return ExperimentConfig(**merged)


# --- IO helpers -----------------------------------------------------------


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    return json.loads(path.read_text())


def read_history(path) -> List[Dict[str, float]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# --- single run -----------------------------------------------------------


def run_single(exp: ExperimentConfig, seed: int, run_dir, manifest: Optional[Manifest] = None) -> dict:
    """Train one seed, select the best epoch and re-evaluate it from disk."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = manifest if manifest is not None else load_manifest(exp.manifest)
    cfg = exp.train_config(seed)
    write_json(
        run_dir / "config.json",
        {
            "experiment": exp.to_dict(),
            "seed": seed,
            "manifest_sha256": manifest.content_hash(),
            "schedule": cfg.schedule.to_dict(),
            "tta_rotations": cfg.tta.n_rotations,
        },
    )
    model = build_model(exp.model, seed)
    result = train(model, manifest, cfg, run_dir=run_dir)
    scores = [h.val_f1 for h in result.history]
    best = select_best(result.checkpoints, scores)
    ckpt_path = run_dir / "checkpoints" / f"epoch{best.epoch:02d}.ckpt"

    # the selected checkpoint is reloaded from disk before the final evaluation
    reloaded = load_checkpoint(ckpt_path)
    final = evaluate(
        model_from_checkpoint(reloaded), manifest, cfg.eval_split, cfg.tta, result.class_weight, cfg.augment.crop_size
    )
    summary = {
        "mode": exp.mode,
        "seed": seed,
        "best_epoch": best.epoch,
        "checkpoint": ckpt_path.relative_to(run_dir).as_posix(),
        "checkpoint_sha256": reloaded.sha256(),
        "class_weight": result.class_weight,
        "metrics": final.metric_dict(),
        "report": final.to_dict(),
    }
    write_json(run_dir / "best.json", summary)
    return summary


def _run_seed_job(args) -> dict:
    exp_dict, seed, run_dir = args
    exp = ExperimentConfig.from_dict(exp_dict)
    try:
        return {"ok": True, "summary": run_single(exp, seed, run_dir)}
    except Exception as exc:  # recorded per seed; the sweep decides whether to fail
        return {"ok": False, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}


# --- sweeps ---------------------------------------------------------------


def summary_table(per_seed: Sequence[Dict[str, float]]) -> Dict[str, Dict[str, float]]:
    """min / mean / std (sample, ddof=1) / max of every metric."""
    table = {}
    for m in TABLE_METRICS:
        vals = np.array([row[m] for row in per_seed], dtype=np.float64)
        table[m] = {
            "min": float(vals.min()),
            "mean": float(vals.mean()),
            "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            "max": float(vals.max()),
            "n": int(vals.size),
        }
    return table


def run_sweep(exp: ExperimentConfig, sweep_dir) -> dict:
    """Run seeds ``base_seed .. base_seed + n_seeds - 1`` and aggregate."""
    sweep_dir = Path(sweep_dir)
    sweep_dir.mkdir(parents=True, exist_ok=True)
    load_manifest(exp.manifest)  # fail early on a bad manifest
    seeds = list(range(exp.base_seed, exp.base_seed + exp.n_seeds))
    jobs = [(exp.to_dict(), s, str(sweep_dir / f"seed_{s:04d}")) for s in seeds]
    if exp.jobs > 1:
        with ProcessPoolExecutor(max_workers=exp.jobs) as pool:
            outcomes = list(pool.map(_run_seed_job, jobs))
    else:
        outcomes = [_run_seed_job(j) for j in jobs]

    failed = [o for o in outcomes if not o["ok"]]
    for f in failed:
        logger.warning("seed %d failed and is excluded: %s", f["seed"], f["error"])
    if len(failed) > MAX_FAILED_FRACTION * len(seeds):
        raise SweepError(f"{len(failed)} of {len(seeds)} seeds failed (limit {MAX_FAILED_FRACTION:.0%})")
    return aggregate_sweep(sweep_dir, exp, [f["seed"] for f in failed])


def aggregate_sweep(sweep_dir, exp: ExperimentConfig, failed_seeds: Sequence[int] = ()) -> dict:
    """Build ``sweep.json`` and ``table.csv`` from the per-seed ``best.json`` files."""
    sweep_dir = Path(sweep_dir)
    runs = []
    for s in range(exp.base_seed, exp.base_seed + exp.n_seeds):
        if s in failed_seeds:
            continue
        best = read_json(sweep_dir / f"seed_{s:04d}" / "best.json")
        runs.append({"seed": s, "best_epoch": best["best_epoch"], "checkpoint_sha256": best["checkpoint_sha256"], **best["metrics"]})
    if not runs:
        raise SweepError("no successful runs to aggregate")
    top = select_best(runs, [r["weighted_f1"] for r in runs])
    result = {
        "mode": exp.mode,
        "base_seed": exp.base_seed,
        "n_seeds": exp.n_seeds,
        "failed_seeds": sorted(failed_seeds),
        "config": exp.to_dict(),
        "per_seed": runs,
        "table": summary_table(runs),
        "selected": f"seed_{top['seed']:04d}/checkpoints/epoch{top['best_epoch']:02d}.ckpt",
        "selected_f1": top["weighted_f1"],
    }
    write_json(sweep_dir / "sweep.json", result)
    with open(sweep_dir / "table.csv", "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["metric", "min", "mean", "std", "max", "n"])
        for m, row in result["table"].items():
            out.writerow([m, repr(row["min"]), repr(row["mean"]), repr(row["std"]), repr(row["max"]), row["n"]])
    return result


# --- ablation comparison ---------------------------------------------------

CURVE_METRICS = ("val_f1", "val_accuracy", "val_sensitivity", "val_specificity", "val_precision", "val_recall", "val_loss", "train_loss")


def epoch_curves(sweep_dir) -> Dict[str, Dict[int, Dict[str, float]]]:
    """Per-epoch mean/std (ddof=1) of each history column across the sweep's seeds."""
    sweep = read_json(Path(sweep_dir) / "sweep.json")
    histories = [read_history(Path(sweep_dir) / f"seed_{r['seed']:04d}" / "history.csv") for r in sweep["per_seed"]]
    out: Dict[str, Dict[int, Dict[str, float]]] = {}
    for metric in CURVE_METRICS:
        by_epoch: Dict[int, List[float]] = {}
        for hist in histories:
            for row in hist:
                by_epoch.setdefault(row["epoch"], []).append(row[metric])
        out[metric] = {
            e: {
                "mean": float(np.mean(v)),
                "std": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0,
                "n": len(v),
            }
            for e, v in sorted(by_epoch.items())
        }
    return out


def compare_sweeps(sweep_dirs: Sequence, out_dir) -> dict:
    """Per-epoch curves for every sweep and a one-sided U test of each
    ablation against the ``proposal`` sweep (alternative: proposal greater)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sweeps = {}
    for d in sweep_dirs:
        s = read_json(Path(d) / "sweep.json")
        if s["mode"] in sweeps:
            raise ConfigurationError(f"two sweeps for mode {s['mode']!r}")
        sweeps[s["mode"]] = (Path(d), s)
    if "proposal" not in sweeps or len(sweeps) < 2:
        raise ConfigurationError("ablate needs a proposal sweep and at least one ablation sweep")

    rows = []
    for mode in sorted(sweeps, key=MODES.index):
        curves = epoch_curves(sweeps[mode][0])
        for metric, by_epoch in curves.items():
            for epoch, st in by_epoch.items():
                rows.append([mode, epoch, metric, repr(st["mean"]), repr(st["std"]), st["n"]])
    with open(out_dir / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "epoch", "metric", "mean", "std", "n"])
        w.writerows(rows)

    prop = [r["weighted_f1"] for r in sweeps["proposal"][1]["per_seed"]]
    tests = {}
    for mode in sorted(sweeps, key=MODES.index):
        if mode == "proposal":
            continue
        other = [r["weighted_f1"] for r in sweeps[mode][1]["per_seed"]]
        if len(other) != len(prop):
            logger.warning("proposal has %d seeds but %s has %d; the U test handles unequal sizes", len(prop), mode, len(other))
        res = mann_whitney_u_one_sided(prop, other, "greater")
        pooled = math.sqrt((np.var(prop, ddof=1) + np.var(other, ddof=1)) / 2) if min(len(prop), len(other)) > 1 else 0.0
        tests[mode] = {
            "u": res.u,
            "p": res.p,
            "method": res.method,
            "n_proposal": len(prop),
            "n_ablation": len(other),
            "mean_f1_proposal": float(np.mean(prop)),
            "mean_f1_ablation": float(np.mean(other)),
            "pooled_std": pooled,
        }
    report = {"modes": sorted(sweeps, key=MODES.index), "tests": tests}
    write_json(out_dir / "ablation.json", report)
    return report


# --- report bundle --------------------------------------------------------


def build_report(src_dir, out_dir) -> List[Path]:
    """Curve CSV, per-subject CSV (healthy first) and a summary JSON.

    ``src_dir`` may be a run directory (has ``best.json``) or a sweep
    directory (has ``sweep.json``; the selected run is used for the curve
    and subject files).
    """
    src_dir, out_dir = Path(src_dir), Path(out_dir)
    if (src_dir / "sweep.json").exists():
        sweep = read_json(src_dir / "sweep.json")
        run_dir = src_dir / sweep["selected"].split("/", 1)[0]
        summary = {"kind": "sweep", "mode": sweep["mode"], "table": sweep["table"], "selected": sweep["selected"], "per_seed": sweep["per_seed"]}
    elif (src_dir / "best.json").exists():
        run_dir = src_dir
        summary = None
    else:
        raise MissingArtifactError(f"missing artifact: neither {src_dir / 'best.json'} nor {src_dir / 'sweep.json'} exists")

    best = read_json(run_dir / "best.json")
    history = read_history(run_dir / "history.csv")
    if summary is None:
        summary = {"kind": "run", "mode": best["mode"], "seed": best["seed"], "best_epoch": best["best_epoch"], "metrics": best["metrics"]}

    out_dir.mkdir(parents=True, exist_ok=True)
    curve = out_dir / "curves.csv"
    with open(curve, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "epoch", "value"])
        for series in CURVE_METRICS:
            for row in history:
                w.writerow([series, row["epoch"], repr(row[series])])
    subjects = out_dir / "subjects.csv"
    write_subject_csv(subjects, {k: tuple(v) for k, v in best["report"]["per_subject"].items()})
    summary_path = out_dir / "summary.json"
    write_json(summary_path, summary)
    return [curve, subjects, summary_path]


def with_mode(exp: ExperimentConfig, mode: str) -> ExperimentConfig:
    return replace(exp, mode=mode)
