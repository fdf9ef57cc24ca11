"""Loss, optimizer, learning-rate schedule and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit

from .augment import AugmentConfig
from .checkpoint import Checkpoint, checkpoint_from_model, save_checkpoint
from .data import ImageCache, Manifest, batch_iterator
from .metrics import EvalReport, compute_metrics
from .model import LR_GROUPS, SEResNeXt
from .tensor import ConfigurationError, Tape, Tensor, record
from .tta import TTAConfig, classify, predict_tta_batch

logger = logging.getLogger(__name__)

PROPOSAL_MULTIPLIERS = {
    "stage1": 1e-6,
    "stage2": 1e-6,
    "stage3": 1e-4,
    "stage4": 1e-4,
    "stage5": 1e-4,
    "fc": 1e-2,
}


class TrainingAborted(RuntimeError):
    pass


# --- loss -----------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    w: float = 1.0

    def __post_init__(self):
        if not self.w > 0:
            raise ConfigurationError(f"class weight must be positive, got {self.w}")


def _bce_terms(z: np.ndarray, y: np.ndarray, w: float) -> np.ndarray:
    # -ln sigma(z) = softplus(-z), -ln(1 - sigma(z)) = softplus(z)
    with np.errstate(invalid="ignore"):
        return w * y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)


def weighted_bce(logits, labels, w: float = 1.0):
    """Mean class-weighted binary cross-entropy on raw logits.

    ``w`` scales only the positive (ALL) term. A ``Tensor`` input of shape
    ``[N]`` or ``[N, 1]`` yields a scalar ``Tensor`` wired into the active
    tape; plain numbers or arrays yield a float.
    """
    if not w > 0:
        raise ConfigurationError(f"class weight must be positive, got {w}")
    y = np.asarray(labels, dtype=np.float64)
    if not isinstance(logits, Tensor):
        z = np.asarray(logits, dtype=np.float64)
        return float(np.mean(_bce_terms(z.reshape(y.shape), y, w)))
    z = logits.data.reshape(y.shape)
    n = y.size

    def backward(g):
        s = expit(z)
        dz = (w * y * (s - 1.0) + (1.0 - y) * s) / n
        return (np.reshape(g, ()) * dz.reshape(logits.shape),)

    return record("weighted_bce", np.array(np.mean(_bce_terms(z, y, w))), (logits,), backward)


def class_weight(manifest, split: str = "train") -> float:
    """``n_negative / n_positive`` over ``split``.

    ``manifest`` may be a :class:`Manifest`, a sequence of records, or a
    ``(n_negative, n_positive)`` pair of counts.
    """
    if isinstance(manifest, tuple) and len(manifest) == 2 and all(isinstance(v, int) for v in manifest):
        n_neg, n_pos = manifest
    else:
        records = manifest.split(split) if isinstance(manifest, Manifest) else [r for r in manifest if r.split == split]
        n_pos = sum(1 for r in records if r.label == 1)
        n_neg = len(records) - n_pos
    if n_pos == 0:
        raise ConfigurationError(f"split {split!r} has no positive (ALL) examples; class weight undefined")
    return n_neg / n_pos


# --- learning rates -------------------------------------------------------


@dataclass(frozen=True)
class LRSchedule:
    eta_base_init: float = 1.0
    decay_factor: float = 10.0
    decay_every_epochs: int = 2
    group_multipliers: Mapping[str, float] = field(default_factory=lambda: dict(PROPOSAL_MULTIPLIERS))

    def __post_init__(self):
        if self.decay_every_epochs < 1:
            raise ConfigurationError(f"decay_every_epochs must be >= 1, got {self.decay_every_epochs}")
        if self.decay_factor <= 0 or self.eta_base_init <= 0:
            raise ConfigurationError("eta_base_init and decay_factor must be positive")
        bad = {g: m for g, m in self.group_multipliers.items() if not m > 0}
        if bad:
            raise ConfigurationError(f"learning-rate multipliers must be positive: {bad}")

    @classmethod
    def uniform(cls, eta_all: float, **kw) -> "LRSchedule":
        """Every group shares ``eta_all``; the base decay is kept."""
        return cls(group_multipliers={g: eta_all for g in LR_GROUPS}, **kw)

    def to_dict(self) -> dict:
        return {
            "eta_base_init": self.eta_base_init,
            "decay_factor": self.decay_factor,
            "decay_every_epochs": self.decay_every_epochs,
            "group_multipliers": {g: self.group_multipliers[g] for g in sorted(self.group_multipliers)},
        }


def eta_base(schedule: LRSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return schedule.eta_base_init / schedule.decay_factor ** (epoch // schedule.decay_every_epochs)


def lr_at(schedule: LRSchedule, epoch: int, group: str) -> float:
    if group not in schedule.group_multipliers:
        raise ConfigurationError(f"unknown learning-rate group {group!r}; known: {sorted(schedule.group_multipliers)}")
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    # one division by the whole decay keeps table values such as 1e-4 / 100 exact
    decay = schedule.decay_factor ** (epoch // schedule.decay_every_epochs)
    return schedule.group_multipliers[group] * schedule.eta_base_init / decay


# --- Adam -----------------------------------------------------------------


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: Mapping[str, float],
    betas=(0.9, 0.999),
    eps: float = 1e-8,
) -> OptimizerState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``lr`` maps each parameter name to its learning rate. Every gradient is
    checked before anything is modified.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient in parameter {name!r} at step {state.step + 1}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in sorted(params):
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr[name] * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# --- epoch loop -----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    batch_size: int = 16
    adam: tuple = (0.9, 0.999, 1e-8)
    seed: int = 0
    schedule: LRSchedule = field(default_factory=LRSchedule)
    loss: Optional[LossConfig] = None  # None: derive from the training split
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    tta: TTAConfig = field(default_factory=TTAConfig)
    eval_split: str = "prelim_test"
    workers: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    report: Optional[EvalReport]
    steps: int
    seconds: float

    @property
    def val_f1(self) -> float:
        return self.report.weighted_f1 if self.report else float("nan")


@dataclass
class TrainResult:
    history: List[EpochRecord]
    checkpoints: List[Checkpoint]
    loss_trace: List[float]
    class_weight: float

    @property
    def best(self) -> Checkpoint:
        return select_best(self.checkpoints, [h.val_f1 for h in self.history])


HISTORY_FIELDS = [
    "epoch",
    "train_loss",
    "val_loss",
    "val_f1",
    "val_accuracy",
    "val_sensitivity",
    "val_specificity",
    "val_precision",
    "val_recall",
]


def history_rows(history: Sequence[EpochRecord]) -> List[list]:
    rows = []
    for h in history:
        r = h.report
        vals = [r.loss, r.weighted_f1, r.accuracy, r.sensitivity, r.specificity, r.weighted_precision, r.weighted_recall] if r else [float("nan")] * 7
        rows.append([h.epoch, h.train_loss] + vals)
    return rows


def write_history_csv(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(HISTORY_FIELDS)
        for row in history_rows(history):
            out.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def evaluate(
    model: SEResNeXt,
    manifest: Manifest,
    split: str = "prelim_test",
    tta: TTAConfig = TTAConfig(),
    w: float = 1.0,
    crop_size: Optional[int] = None,
    batch_size: int = 64,
    cache: Optional[ImageCache] = None,
) -> EvalReport:
    """Metric panel for ``split`` using rotation-averaged predictions.

    The reported loss is the weighted cross-entropy of the averaged
    probability.
    """
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    cache = cache or ImageCache()
    probs = []
    for start in range(0, len(records), batch_size):
        imgs = [cache.get(manifest.resolve(r)) for r in records[start:start + batch_size]]
        probs.append(predict_tta_batch(model, imgs, tta, crop_size))
    p = np.concatenate(probs)
    y = np.array([r.label for r in records], dtype=np.float64)
    report = compute_metrics(y.astype(int), classify(p, tta.threshold), [r.subject_id for r in records])
    q = np.clip(p, 1e-15, 1.0 - 1e-15)
    report.loss = float(np.mean(-w * y * np.log(q) - (1.0 - y) * np.log1p(-q)))
    return report


def make_eval_hook(manifest: Manifest, cfg: TrainConfig, w: float, cache: Optional[ImageCache] = None) -> Callable:
    cache = cache or ImageCache()
    crop = cfg.augment.crop_size

    def hook(model: SEResNeXt) -> EvalReport:
        return evaluate(model, manifest, cfg.eval_split, cfg.tta, w, crop, cache=cache)

    return hook


def train(
    model: SEResNeXt,
    manifest: Manifest,
    cfg: TrainConfig,
    eval_hook: Optional[Callable] = None,
    run_dir=None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of weighted-BCE training with Adam.

    After each epoch ``eval_hook(model)`` (default: TTA evaluation on
    ``cfg.eval_split``) is recorded and a checkpoint is taken. With
    ``run_dir`` the checkpoints and ``history.csv`` are written there.
    ``max_steps`` stops early, mid-epoch if necessary.
    """
    if not manifest.split("train"):
        raise ValueError("the training split is empty")
    w = cfg.loss.w if cfg.loss else class_weight(manifest, "train")
    if not w > 0:
        raise ConfigurationError("the training split has no negative examples; the class weight would be 0")
    cache = ImageCache()
    if eval_hook is None:
        eval_hook = make_eval_hook(manifest, cfg, w, cache)
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    arrays = {k: p.data for k, p in model.params.items()}
    state = OptimizerState.zeros_like(arrays)
    beta1, beta2, eps = cfg.adam
    history: List[EpochRecord] = []
    checkpoints: List[Checkpoint] = []
    trace: List[float] = []

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = {k: lr_at(cfg.schedule, epoch, model.group_of(k)) for k in arrays}
        losses, steps, n_seen = [], 0, 0
        for batch in batch_iterator(
            manifest, "train", cfg.batch_size, cfg.augment, cfg.seed, epoch, cache=cache, workers=cfg.workers
        ):
            if max_steps is not None and state.step >= max_steps:
                break
            model.zero_grad()
            with Tape() as tape:
                loss = weighted_bce(model.forward(batch.images, training=True), batch.labels, w)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, step {state.step + 1}")
            tape.backward(loss, model.parameters())
            adam_step(arrays, {k: p.grad for k, p in model.params.items()}, state, lr, (beta1, beta2), eps)
            losses.append(value * len(batch.labels))
            n_seen += len(batch.labels)
            steps += 1
            trace.append(value)
        train_loss = float(sum(losses) / n_seen) if n_seen else float("nan")
        report = eval_hook(model) if eval_hook else None
        rec = EpochRecord(epoch, train_loss, report, steps, time.perf_counter() - t0)
        history.append(rec)
        # scores live in the history, so checkpoints depend on training alone
        ckpt = checkpoint_from_model(model, epoch, None, {"class_weight": w})
        checkpoints.append(ckpt)
        if run_dir is not None:
            save_checkpoint(run_dir / "checkpoints" / f"epoch{epoch:02d}.ckpt", ckpt)
            write_history_csv(run_dir / "history.csv", history)
        logger.info("epoch %d: loss %.4f val_f1 %.4f (%d steps, %.1fs)", epoch, train_loss, rec.val_f1, steps, rec.seconds)
        if max_steps is not None and state.step >= max_steps:
            break
    return TrainResult(history, checkpoints, trace, w)


def select_best(checkpoints: Sequence, scores: Sequence[float]):
    """Checkpoint with the highest score; the earliest wins ties."""
    if not scores:
        raise ValueError("cannot select from an empty history")
    if len(checkpoints) != len(scores):
        raise ValueError(f"{len(checkpoints)} checkpoints but {len(scores)} scores")
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return checkpoints[best]


def with_schedule(cfg: TrainConfig, schedule: LRSchedule) -> TrainConfig:
    return replace(cfg, schedule=schedule)
