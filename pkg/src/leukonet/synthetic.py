"""Procedural stand-in for a segmented white-blood-cell dataset.

Each image holds one roughly elliptical cell on a black background. Cells
from leukemic (ALL) subjects are larger and have a coarser nuclear texture
than healthy ones; the size ranges overlap slightly so the task is not
perfectly separable by area alone. A small fraction of cells imitates
segmentation failures (a clipped wedge or a fringe of leftover background).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List

import numpy as np
from scipy import ndimage

from .data import Manifest, SampleRecord, save_image, write_manifest
from .tensor import ConfigurationError

logger = logging.getLogger(__name__)

# cell radius as a fraction of the image side
RADIUS_RANGE = {0: (0.13, 0.22), 1: (0.26, 0.35)}
# smoothing sigma of the chromatin texture, in pixels at 64 px
TEXTURE_SIGMA = {0: 0.7, 1: 2.2}


@dataclass(frozen=True)
class SyntheticParams:
    n_subjects: int = 30
    cells_per_subject: int = 40
    class_imbalance: float = 2.0
    image_size: int = 64
    seed: int = 0
    artifact_rate: float = 0.05


def subject_counts(n_subjects: int, class_imbalance: float):
    """Split ``n_subjects`` into (ALL, normal) with ratio ``class_imbalance``."""
    n_all = int(round(n_subjects * class_imbalance / (1.0 + class_imbalance)))
    return n_all, n_subjects - n_all


def _split_subjects(ids: List[str], rng: np.random.Generator):
    ids = list(rng.permutation(ids))
    n = len(ids)
    n_final = n // 5
    n_prelim = max(1, int(round(n / 5)))
    if n - n_final - n_prelim < 1:
        n_final = max(0, n - n_prelim - 1)
    out = {}
    for i, sid in enumerate(ids):
        out[str(sid)] = "prelim_test" if i < n_prelim else ("final_test" if i < n_prelim + n_final else "train")
    return out


def render_cell(label: int, size: int, rng: np.random.Generator, tint: np.ndarray, radius_shift: float):
    """Draw one cell; returns the ``[size, size, 3]`` image and its cell mask."""
    lo, hi = RADIUS_RANGE[label]
    radius = (rng.uniform(lo, hi) + radius_shift) * size
    aspect = rng.uniform(0.85, 1.0)
    phi = rng.uniform(0, np.pi)
    cy, cx = (size - 1) / 2 + rng.uniform(-0.04, 0.04, size=2) * size

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(phi) + dy * np.sin(phi)
    v = (-dx * np.sin(phi) + dy * np.cos(phi)) / aspect
    r = np.hypot(u, v)
    ang = np.arctan2(v, u)
    wobble = 1.0
    for k in (3, 5):
        wobble = wobble + 0.04 * rng.uniform(0.3, 1.0) * np.cos(k * ang + rng.uniform(0, 2 * np.pi))
    rel = r / (radius * wobble)
    cell = rel <= 1.0

    nucleus_frac = rng.uniform(0.55, 0.7) if label == 0 else rng.uniform(0.7, 0.85)
    nucleus = rel <= nucleus_frac

    scale = size / 64.0
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), TEXTURE_SIGMA[label] * scale)
    noise /= noise.std() + 1e-12

    cyto = np.array([0.78, 0.66, 0.86]) * tint
    nuc = np.array([0.42, 0.24, 0.58]) * tint
    img = np.zeros((size, size, 3))
    img[cell] = cyto
    img[nucleus] = nuc
    img[nucleus] += 0.09 * noise[nucleus][:, None]
    img[cell & ~nucleus] += 0.03 * noise[cell & ~nucleus][:, None]
    return np.clip(img, 0.0, 1.0), cell


def _add_artifact(img: np.ndarray, cell: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    if rng.random() < 0.5:
        # clipped wedge: part of the cell wrongly blacked out
        a0 = rng.uniform(0, 2 * np.pi)
        ang = np.arctan2(yy - size / 2, xx - size / 2)
        wedge = np.cos(ang - a0) > np.cos(rng.uniform(0.3, 0.6))
        img = img.copy()
        img[wedge] = 0.0
    else:
        # leftover background fringe along one border
        img = img.copy()
        width = int(rng.integers(2, max(3, size // 10)))
        band = np.zeros((size, size), dtype=bool)
        band[:, :width] = True
        band = np.rot90(band, k=int(rng.integers(0, 4)))
        img[band & ~cell] = np.array([0.85, 0.8, 0.82]) + 0.03 * rng.standard_normal((int((band & ~cell).sum()), 3))
        img = np.clip(img, 0.0, 1.0)
    return img


def generate_synthetic_dataset(
    n_subjects: int = 30,
    cells_per_subject: int = 40,
    class_imbalance: float = 2.0,
    image_size: int = 64,
    seed: int = 0,
    out_dir=".",
    artifact_rate: float = 0.05,
) -> Manifest:
    """Render a subject-structured dataset and write its manifest.

    Writes ``images/<subject>/<subject>_<k>.png``, ``manifest.csv`` and
    ``metadata.json`` under ``out_dir``. Healthy subjects are named ``H..``
    and leukemic ones ``A..``. Splits are assigned per subject.
    """
    if class_imbalance <= 0:
        raise ConfigurationError(f"class_imbalance must be positive, got {class_imbalance}")
    n_all, n_normal = subject_counts(n_subjects, class_imbalance)
    if n_all < 2 or n_normal < 2:
        raise ConfigurationError(
            f"need at least 2 subjects per class, got {n_all} ALL / {n_normal} normal from n_subjects={n_subjects}"
        )
    if cells_per_subject < 1 or image_size < 16:
        raise ConfigurationError("cells_per_subject must be >= 1 and image_size >= 16")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    all_ids = [f"A{i + 1:02d}" for i in range(n_all)]
    normal_ids = [f"H{i + 1:02d}" for i in range(n_normal)]
    split_of = {**_split_subjects(all_ids, rng), **_split_subjects(normal_ids, rng)}

    records = []
    for sid in all_ids + normal_ids:
        label = 1 if sid.startswith("A") else 0
        sub_rng = np.random.default_rng([seed, int(sid[1:]), label])
        tint = 1.0 + sub_rng.uniform(-0.06, 0.06, size=3)
        radius_shift = sub_rng.uniform(-0.01, 0.01)
        (out_dir / "images" / sid).mkdir(exist_ok=True)
        for k in range(cells_per_subject):
            img, cell = render_cell(label, image_size, sub_rng, tint, radius_shift)
            if sub_rng.random() < artifact_rate:
                img = _add_artifact(img, cell, sub_rng)
            rel = f"images/{sid}/{sid}_{k:03d}.png"
            save_image(out_dir / rel, img)
            records.append(SampleRecord(rel, label, sid, split_of[sid]))

    write_manifest(out_dir / "manifest.csv", records)
    manifest = Manifest(records, root=out_dir)
    params = SyntheticParams(n_subjects, cells_per_subject, class_imbalance, image_size, seed, artifact_rate)
    meta = {
        "generator": "leukonet.synthetic",
        "params": asdict(params),
        "class_counts": {"ALL": sum(r.label for r in records), "normal": sum(1 - r.label for r in records)},
        "split_counts": manifest.counts(),
        "subjects": {s: split_of[s] for s in sorted(split_of)},
        "manifest_sha256": manifest.content_hash(),
    }
    with open(out_dir / "metadata.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    logger.info("wrote %d images for %d subjects to %s", len(records), n_subjects, out_dir)
    return manifest
