"""Test-time rotation averaging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .augment import center_crop, flip_h, rotate
from .tensor import ConfigurationError


@dataclass(frozen=True)
class TTAConfig:
    """``preset="rotations"`` uses angles ``360 k / n``; ``"dihedral"`` uses
    the four right angles with and without a horizontal flip (n must be 8).
    ``combine`` averages probabilities (``"probability"``) or logits (``"logit"``).
    """

    n_rotations: int = 8
    combine: str = "probability"
    threshold: float = 0.5
    preset: str = "rotations"
    interpolation: str = "bilinear"

    def __post_init__(self):
        if self.n_rotations < 1:
            raise ConfigurationError(f"n_rotations must be >= 1, got {self.n_rotations}")
        if self.combine not in ("probability", "logit"):
            raise ConfigurationError(f"unknown combine mode {self.combine!r}")
        if self.preset not in ("rotations", "dihedral"):
            raise ConfigurationError(f"unknown TTA preset {self.preset!r}")
        if self.preset == "dihedral" and self.n_rotations != 8:
            raise ConfigurationError("the dihedral preset has exactly 8 views")

    @classmethod
    def single(cls) -> "TTAConfig":
        return cls(n_rotations=1)

    def views(self) -> List[Tuple[bool, float]]:
        """(flip, angle) pairs in evaluation order."""
        if self.preset == "dihedral":
            return [(f, 90.0 * k) for f in (False, True) for k in range(4)]
        return [(False, 360.0 * k / self.n_rotations) for k in range(self.n_rotations)]


def _view(img: np.ndarray, flip: bool, angle: float, crop: Optional[int], interpolation: str) -> np.ndarray:
    out = flip_h(img) if flip else img
    out = rotate(out, angle, interpolation)
    return center_crop(out, crop) if crop else out


def predict_logits(model, images: Sequence[np.ndarray]) -> np.ndarray:
    x = np.stack(images).transpose(0, 3, 1, 2)
    return model.forward(x, training=False).data[:, 0]


def predict_tta_batch(
    model,
    images: Sequence[np.ndarray],
    cfg: TTAConfig = TTAConfig(),
    crop_size: Optional[int] = None,
    predict: Optional[Callable] = None,
) -> np.ndarray:
    """ALL probability for each ``[H, W, 3]`` image, averaged over the views.

    Views are summed in a fixed order, so the result does not depend on how
    the forward passes are scheduled.
    """
    predict = predict or (lambda batch: predict_logits(model, batch))
    total = np.zeros(len(images))
    for flip, angle in cfg.views():
        logits = predict([_view(img, flip, angle, crop_size, cfg.interpolation) for img in images])
        total += expit(logits) if cfg.combine == "probability" else logits
    mean = total / len(cfg.views())
    return mean if cfg.combine == "probability" else expit(mean)


def predict_tta(model, img: np.ndarray, cfg: TTAConfig = TTAConfig(), crop_size: Optional[int] = None) -> float:
    return float(predict_tta_batch(model, [img], cfg, crop_size)[0])


def classify(probabilities, threshold: float = 0.5) -> np.ndarray:
    """ALL (1) iff the probability reaches the threshold; ties go positive."""
    return (np.asarray(probabilities) >= threshold).astype(int)
