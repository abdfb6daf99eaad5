"""Fixations, ground-truth density maps, and resize-and-pad preprocessing.

Maps are plain 2-D float arrays indexed ``[row, col]``; a fixation at
``(x, y)`` lands on pixel ``(round(y), round(x))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.transform import resize

from .exceptions import DegenerateInputError, DimensionError

CANVAS_W, CANVAS_H = 384, 288


@dataclass
class FixationSet:
    """Fixation points of one image, in pixel coordinates."""

    x: np.ndarray
    y: np.ndarray
    observer: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).ravel()
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        self.observer = np.asarray(self.observer, dtype=np.int64).ravel()
        if not (len(self.x) == len(self.y) == len(self.observer)):
            raise DimensionError("fixation coordinate arrays differ in length")

    def __len__(self):
        return len(self.x)

    @classmethod
    def from_points(cls, points, observer=0):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return cls(pts[:, 0], pts[:, 1], np.full(len(pts), observer))

    def clamped(self, width, height):
        """Copy with coordinates clipped into ``[0, width) x [0, height)``."""
        x = np.clip(self.x, 0.0, np.nextafter(float(width), 0.0))
        y = np.clip(self.y, 0.0, np.nextafter(float(height), 0.0))
        return FixationSet(x, y, self.observer.copy())


@dataclass(frozen=True)
class PadRecord:
    """Geometry needed to undo :func:`resize_pad`."""

    orig_w: int
    orig_h: int
    scale: float
    new_w: int
    new_h: int
    left: int
    top: int
    target_w: int
    target_h: int


def _round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def pixel_indices(fx, width, height):
    """Rows and columns of the pixels hit by each fixation."""
    cols = np.clip(_round_half_away(fx.x), 0, width - 1).astype(np.int64)
    rows = np.clip(_round_half_away(fx.y), 0, height - 1).astype(np.int64)
    return rows, cols


def fixation_map_from_set(fx, width, height):
    """Binary (height, width) map with every fixated pixel set to 1."""
    if len(fx) == 0:
        raise DegenerateInputError("empty fixation set")
    fmap = np.zeros((height, width))
    rows, cols = pixel_indices(fx, width, height)
    fmap[rows, cols] = 1.0
    return fmap


def normalize(smap):
    """Scale a nonnegative map to sum to 1."""
    smap = np.asarray(smap, dtype=np.float64)
    if np.any(smap < 0):
        raise DegenerateInputError("saliency map has negative values")
    total = smap.sum()
    if not total > 0:
        raise DegenerateInputError("saliency map sums to zero")
    return smap / total


def default_sigma(width):
    return width / 32.0


def density_from_fixations(fx, width, height, sigma=None):
    """Sum of isotropic Gaussians at each fixation, cut at 4 sigma, normalized to 1."""
    if len(fx) == 0:
        raise DegenerateInputError("empty fixation set; refusing an all-zero ground truth")
    sigma = default_sigma(width) if sigma is None else float(sigma)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    radius2 = (4.0 * sigma) ** 2
    dens = np.zeros((height, width))
    for x, y in zip(fx.x, fx.y):
        d2 = (cols - x) ** 2 + (rows - y) ** 2
        dens += np.where(d2 <= radius2, np.exp(-d2 / (2.0 * sigma * sigma)), 0.0)
    if not dens.sum() > 0:
        raise DegenerateInputError("all fixations fall outside the grid")
    return dens / dens.sum()


def check_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"image must be shaped (3, H, W), got {img.shape}")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return img


def _resize(arr, out_h, out_w):
    # arr: (C, H, W)
    if arr.shape[1:] == (out_h, out_w):
        return arr.copy()
    return resize(arr, (arr.shape[0], out_h, out_w), order=1, mode="edge",
                  anti_aliasing=False, preserve_range=True)


def resize_pad(img, target_w=CANVAS_W, target_h=CANVAS_H):
    """Aspect-preserving bilinear resize into the target box, then centred zero padding."""
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    _, h, w = arr.shape
    if h < 1 or w < 1:
        raise DimensionError("empty image")
    scale = min(target_w / w, target_h / h)
    new_w = min(target_w, max(1, int(round(w * scale))))
    new_h = min(target_h, max(1, int(round(h * scale))))
    left = (target_w - new_w) // 2
    top = (target_h - new_h) // 2
    out = np.zeros((arr.shape[0], target_h, target_w))
    out[:, top:top + new_h, left:left + new_w] = _resize(arr, new_h, new_w)
    rec = PadRecord(w, h, scale, new_w, new_h, left, top, target_w, target_h)
    return (out[0] if squeeze else out), rec


def unpad_resize(arr, rec):
    """Crop away the padding recorded in ``rec`` and resize back to the source size."""
    arr = np.asarray(arr, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.shape[1:] != (rec.target_h, rec.target_w):
        raise DimensionError(f"expected a {rec.target_h}x{rec.target_w} canvas, got {arr.shape[1:]}")
    crop = arr[:, rec.top:rec.top + rec.new_h, rec.left:rec.left + rec.new_w]
    out = _resize(crop, rec.orig_h, rec.orig_w)
    return out[0] if squeeze else out
