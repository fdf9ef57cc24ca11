"""Geometric transforms and the training-time augmentation policy.

Images are ``[H, W, 3]`` float arrays with values in [0, 1]. Everything
outside the source image is filled with black, which is also the background
colour of segmented cell images. No scaling and no colour changes are ever
applied: cell size and stain are informative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import ConfigurationError, DimensionError


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    max_translate_frac: float = 0.2
    crop_size: int = 64
    enabled: bool = True
    interpolation: str = "bilinear"  # or "nearest"

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigurationError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if not 0.0 <= self.max_translate_frac < 1.0:
            raise ConfigurationError(f"max_translate_frac must lie in [0, 1), got {self.max_translate_frac}")
        if self.crop_size < 1:
            raise ConfigurationError(f"crop_size must be positive, got {self.crop_size}")
        if self.interpolation not in ("bilinear", "nearest"):
            raise ConfigurationError(f"unknown interpolation {self.interpolation!r}")

    @classmethod
    def full_scale(cls) -> "AugmentConfig":
        """450x450 source images cropped to 300x300."""
        return cls(crop_size=300)


@dataclass(frozen=True)
class AugmentParams:
    flip_h: bool
    flip_v: bool
    angle: float
    dx: int
    dy: int


def flip_h(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def flip_v(img: np.ndarray) -> np.ndarray:
    return img[::-1].copy()


def rotate(img: np.ndarray, degrees: float, interpolation: str = "bilinear") -> np.ndarray:
    """Rotate counter-clockwise about the image centre, keeping the frame size.

    Multiples of 90 degrees are exact pixel permutations (square images).
    Other angles are resampled with bilinear or nearest-neighbour
    interpolation; pixels that map outside the source become black.
    """
    turns = degrees / 90.0
    h, w = img.shape[:2]
    if turns == int(turns) and (h == w or int(turns) % 2 == 0):
        return np.rot90(img, k=int(turns) % 4, axes=(0, 1)).copy()

    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    # output (row, col) -> input (row, col), both relative to the centre
    matrix = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0, 0.0])
    offset = centre - matrix @ centre
    order = 1 if interpolation == "bilinear" else 0
    out = ndimage.affine_transform(img, matrix, offset=offset, order=order, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def translate(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift content right by ``dx`` and down by ``dy`` whole pixels."""
    dx, dy = int(dx), int(dy)
    h, w = img.shape[:2]
    out = np.zeros_like(img)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_r = slice(max(0, -dy), h - max(0, dy))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[dst_r, dst_c] = img[src_r, src_c]
    return out


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if size > min(h, w):
        raise DimensionError(f"crop size {size} exceeds image size {h}x{w}")
    top = (h - size) // 2
    left = (w - size) // 2
    return img[top:top + size, left:left + size].copy()


def sample_params(cfg: AugmentConfig, rng: np.random.Generator, shape) -> AugmentParams:
    """Draw one set of augmentation parameters.

    Translations are truncated toward zero to whole pixels, so they never
    exceed ``max_translate_frac`` of the side length.

    All five variates are drawn on every call so the generator advances by
    the same amount regardless of the outcome.
    """
    h, w = shape[:2]
    u = rng.random(5)
    fx = cfg.max_translate_frac * w
    fy = cfg.max_translate_frac * h
    return AugmentParams(
        flip_h=bool(u[0] < cfg.flip_prob),
        flip_v=bool(u[1] < cfg.flip_prob),
        angle=float(360.0 * u[2]),
        dx=int(-fx + 2 * fx * u[3]),
        dy=int(-fy + 2 * fy * u[4]),
    )


def apply_params(img: np.ndarray, params: AugmentParams, cfg: AugmentConfig) -> np.ndarray:
    out = img
    if params.flip_h:
        out = flip_h(out)
    if params.flip_v:
        out = flip_v(out)
    out = rotate(out, params.angle, cfg.interpolation)
    out = translate(out, params.dx, params.dy)
    return center_crop(out, cfg.crop_size)


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random flips, rotation and translation at full resolution, then centre crop.

    With ``cfg.enabled`` false only the centre crop is applied (evaluation).
    """
    if not cfg.enabled:
        return center_crop(img, cfg.crop_size)
    return apply_params(img, sample_params(cfg, rng, img.shape), cfg)
