"""Dataset manifests, image I/O and the batch iterator.

A manifest is a CSV file with the header ``image_path,label,subject_id,split``.
Image paths are relative to the manifest's directory unless absolute.
Labels are ``1``/``ALL`` for leukemic cells and ``0``/``normal``/``hem`` for
healthy ones. Every subject must live in exactly one split.
"""

from __future__ import annotations

import csv
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
from PIL import Image

from .augment import AugmentConfig, augment
from .tensor import Tensor

SPLITS = ("train", "prelim_test", "final_test")
HEADER = ["image_path", "label", "subject_id", "split"]
LABEL_TOKENS = {"1": 1, "all": 1, "0": 0, "normal": 0, "hem": 0}


class ManifestError(ValueError):
    """Malformed manifest row; the message names the line number."""


class IntegrityError(ValueError):
    """Manifest violates a cross-row constraint (duplicates, subject leakage)."""


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    label: int
    subject_id: str
    split: str


class Manifest(list):
    """List of :class:`SampleRecord` that remembers where its images live."""

    def __init__(self, records: Sequence[SampleRecord] = (), root: Optional[os.PathLike] = None):
        super().__init__(records)
        self.root = Path(root) if root is not None else Path(".")

    def resolve(self, record: SampleRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.root / p

    def split(self, name: str) -> List[SampleRecord]:
        return [r for r in self if r.split == name]

    def subjects(self, split: Optional[str] = None) -> List[str]:
        return sorted({r.subject_id for r in self if split is None or r.split == split})

    def counts(self) -> Dict[str, Dict[str, int]]:
        out = {s: {"ALL": 0, "normal": 0} for s in SPLITS}
        for r in self:
            out[r.split]["ALL" if r.label == 1 else "normal"] += 1
        return out

    def content_hash(self) -> str:
        """SHA-256 over the canonical CSV rendering of the records."""
        h = hashlib.sha256()
        h.update((",".join(HEADER) + "\n").encode())
        for r in self:
            h.update(f"{r.image_path},{r.label},{r.subject_id},{r.split}\n".encode())
        return h.hexdigest()


def _parse_label(token: str, lineno: int) -> int:
    key = token.strip().lower()
    if key not in LABEL_TOKENS:
        raise ManifestError(f"line {lineno}: unknown label token {token!r}")
    return LABEL_TOKENS[key]


def validate_records(records: Sequence[SampleRecord]) -> None:
    seen_paths = set()
    subject_split: Dict[str, str] = {}
    for r in records:
        if r.image_path in seen_paths:
            raise IntegrityError(f"duplicate image path {r.image_path!r}")
        seen_paths.add(r.image_path)
        prev = subject_split.setdefault(r.subject_id, r.split)
        if prev != r.split:
            raise IntegrityError(f"subject {r.subject_id!r} appears in splits {prev!r} and {r.split!r}")


def load_manifest(path) -> Manifest:
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != HEADER:
            raise ManifestError(f"line 1: expected header {','.join(HEADER)!r}, got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ManifestError(f"line {lineno}: expected 4 fields, got {len(row)}")
            image_path, label, subject, split = (c.strip() for c in row)
            if not image_path:
                raise ManifestError(f"line {lineno}: empty image_path")
            if not subject:
                raise ManifestError(f"line {lineno}: empty subject_id")
            if split not in SPLITS:
                raise ManifestError(f"line {lineno}: unknown split {split!r}")
            records.append(SampleRecord(image_path, _parse_label(label, lineno), subject, split))
    validate_records(records)
    return Manifest(records, root=path.parent)


def write_manifest(path, records: Sequence[SampleRecord]) -> None:
    validate_records(records)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(HEADER) + "\n")
        for r in records:
            fh.write(f"{r.image_path},{r.label},{r.subject_id},{r.split}\n")


def load_image(path) -> np.ndarray:
    """Decode an 8-bit image to a float ``[H, W, 3]`` array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"image not found: {path}") from exc
    return arr / 255.0


def save_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


class ImageCache:
    """Decoded images keyed by resolved path."""

    def __init__(self):
        self._images: Dict[str, np.ndarray] = {}

    def get(self, path) -> np.ndarray:
        key = str(path)
        img = self._images.get(key)
        if img is None:
            img = load_image(path)
            img.setflags(write=False)
            self._images[key] = img
        return img


@dataclass
class Batch:
    images: Tensor
    labels: np.ndarray
    subject_ids: List[str]


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iterator(
    manifest: Manifest,
    split: str,
    batch_size: int,
    augment_cfg: AugmentConfig,
    shuffle_seed: int,
    epoch: int = 0,
    shuffle: bool = True,
    cache: Optional[ImageCache] = None,
    workers: int = 0,
) -> Iterator[Batch]:
    """Yield one epoch of ``split`` in batches of ``batch_size``.

    The sample order depends only on ``(shuffle_seed, epoch)`` and each
    sample's augmentation on ``(shuffle_seed, epoch, index)``, so the output
    is identical for any ``workers`` count. The final partial batch is kept.
    """
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    cache = cache or ImageCache()
    order = epoch_order(len(records), shuffle_seed, epoch, shuffle)

    def prepare(idx: int) -> np.ndarray:
        img = cache.get(manifest.resolve(records[idx]))
        return augment(img, augment_cfg, sample_rng(shuffle_seed, epoch, int(idx)))

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None
    try:
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            imgs = list(pool.map(prepare, chunk)) if pool else [prepare(i) for i in chunk]
            x = np.stack(imgs).transpose(0, 3, 1, 2)
            yield Batch(
                images=Tensor(x),
                labels=np.array([records[i].label for i in chunk], dtype=np.float64),
                subject_ids=[records[i].subject_id for i in chunk],
            )
    finally:
        if pool:
            pool.shutdown()
