"""Classification metrics with ALL (label 1) as the positive class.

Weighted precision, recall and F1 average the per-class scores with class
support weights ``support_c / N``. A ratio whose denominator is zero is
reported as 0 and its name is added to ``EvalReport.undefined``.
"""

from __future__ import annotations

import csv
import json
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, labels, predictions) -> "ConfusionCounts":
        y = np.asarray(labels).astype(int)
        p = np.asarray(predictions).astype(int)
        return cls(
            tp=int(((y == 1) & (p == 1)).sum()),
            fp=int(((y == 0) & (p == 1)).sum()),
            tn=int(((y == 0) & (p == 0)).sum()),
            fn=int(((y == 1) & (p == 0)).sum()),
        )


@dataclass
class EvalReport:
    confusion: ConfusionCounts
    accuracy: float
    sensitivity: float
    specificity: float
    weighted_f1: float
    weighted_precision: float
    weighted_recall: float
    per_subject: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    undefined: List[str] = field(default_factory=list)
    loss: Optional[float] = None

    METRICS = ("accuracy", "sensitivity", "specificity", "weighted_f1", "weighted_precision", "weighted_recall")

    def metric_dict(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in self.METRICS}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_subject"] = {k: list(v) for k, v in sorted(self.per_subject.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["confusion"] = ConfusionCounts(**d["confusion"])
        d["per_subject"] = {k: tuple(v) for k, v in d.get("per_subject", {}).items()}
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _ratio(num: int, den: int, name: str, undefined: List[str]) -> Fraction:
    if den == 0:
        undefined.append(name)
        return Fraction(0)
    return Fraction(num, den)


def _f1(tp: int, fp: int, fn: int) -> Fraction:
    # 2PR/(P+R) in closed form; 0 when the class is never predicted nor present
    den = 2 * tp + fp + fn
    return Fraction(2 * tp, den) if den else Fraction(0)


def compute_metrics(labels, predictions, subject_ids: Optional[Sequence[str]] = None) -> EvalReport:
    """Full metric panel for binary ``predictions`` against ``labels``.

    Every metric is evaluated as an exact rational and rounded to float once,
    so algebraically equal quantities (weighted recall and accuracy, for
    instance) compare equal.
    """
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape:
        raise ValueError(f"labels {labels.shape} and predictions {predictions.shape} differ in length")
    if labels.size == 0:
        raise ValueError("compute_metrics needs at least one sample")
    cc = ConfusionCounts.from_predictions(labels, predictions)
    n = cc.total
    undefined: List[str] = []

    # class 1 = ALL, class 0 = normal
    prec1 = _ratio(cc.tp, cc.tp + cc.fp, "precision_all", undefined)
    rec1 = _ratio(cc.tp, cc.tp + cc.fn, "sensitivity", undefined)
    prec0 = _ratio(cc.tn, cc.tn + cc.fn, "precision_normal", undefined)
    rec0 = _ratio(cc.tn, cc.tn + cc.fp, "specificity", undefined)
    w0 = Fraction(cc.tn + cc.fp, n)
    w1 = Fraction(cc.tp + cc.fn, n)

    per_subject = {}
    if subject_ids is not None:
        per_subject = subject_counts(labels, predictions, subject_ids)

    return EvalReport(
        confusion=cc,
        accuracy=float(Fraction(cc.tp + cc.tn, n)),
        sensitivity=float(rec1),
        specificity=float(rec0),
        weighted_f1=float(w0 * _f1(cc.tn, cc.fn, cc.fp) + w1 * _f1(cc.tp, cc.fp, cc.fn)),
        weighted_precision=float(w0 * prec0 + w1 * prec1),
        weighted_recall=float(w0 * rec0 + w1 * rec1),
        per_subject=per_subject,
        undefined=undefined,
    )


def subject_counts(labels, predictions, subject_ids) -> Dict[str, Tuple[int, int]]:
    if not (len(labels) == len(predictions) == len(subject_ids)):
        raise ValueError("labels, predictions and subject_ids must be aligned")
    out: Dict[str, List[int]] = {}
    for y, p, s in zip(labels, predictions, subject_ids):
        c = out.setdefault(str(s), [0, 0])
        c[0] += int(int(y) == int(p))
        c[1] += 1
    return {k: (v[0], v[1]) for k, v in out.items()}


def subject_accuracy(labels, predictions, subject_ids, known_subjects: Optional[Sequence[str]] = None) -> Dict[str, float]:
    """Fraction of correctly classified cells per subject.

    If ``known_subjects`` is given, any other subject id raises.
    """
    if known_subjects is not None:
        known = set(known_subjects)
        unknown = sorted({str(s) for s in subject_ids} - known)
        if unknown:
            raise KeyError(f"predictions reference unknown subjects: {unknown}")
    return {k: c / t for k, (c, t) in subject_counts(labels, predictions, subject_ids).items()}


def is_healthy(subject_id: str) -> bool:
    return subject_id.upper().startswith("H")


def subject_table_rows(per_subject: Dict[str, Tuple[int, int]]) -> List[Tuple[str, int, int, float]]:
    """Rows ``(subject_id, is_healthy, n_cells, accuracy)``, healthy subjects first."""
    keys = sorted(per_subject, key=lambda s: (not is_healthy(s), s))
    return [(s, int(is_healthy(s)), per_subject[s][1], per_subject[s][0] / per_subject[s][1]) for s in keys]


def write_subject_csv(path, per_subject: Dict[str, Tuple[int, int]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "is_healthy", "n_cells", "accuracy"])
        for s, h, n, acc in subject_table_rows(per_subject):
            w.writerow([s, h, n, repr(acc)])
