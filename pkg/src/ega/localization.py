"""From class activation maps to boxes and dense score maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import ContractError, DimensionError

DEFAULT_TAU = 0.2
TAU_GRID: Tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(1, 20))

# 4-connectivity
_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel box [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1 and self.x0 >= 0 and self.y0 >= 0):
            raise ContractError(f"invalid box {self.as_tuple()}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    def within(self, height: int, width: int) -> bool:
        return self.x1 <= width and self.y1 <= height

    @classmethod
    def full(cls, height: int, width: int) -> "BoundingBox":
        return cls(0, 0, width, height)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Rows of linear-interpolation weights, corners aligned."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi - lo < 1e-12:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def upsample_cam(cam, height: int, width: int) -> np.ndarray:
    """Bilinear (corner-aligned) resize to ``height x width`` then min-max normalize.

    ``cam`` may be a 2-D array, or a CamMap / 3-D array holding a batch, in
    which case every map is processed independently.
    """
    values = getattr(cam, "values", cam)
    values = np.asarray(getattr(values, "data", values), dtype=np.float64)
    if height < 1 or width < 1:
        raise DimensionError(f"target size must be positive, got {height}x{width}")
    if values.ndim == 3:
        return np.stack([upsample_cam(v, height, width) for v in values])
    if values.ndim != 2:
        raise DimensionError(f"expected a 2-D map, got shape {values.shape}")
    h, w = values.shape
    if height < h or width < w:
        raise DimensionError(f"target {height}x{width} smaller than source {h}x{w}")
    if not np.isfinite(values).all():
        raise ContractError("CAM contains non-finite values")
    resized = _interp_matrix(height, h) @ values @ _interp_matrix(width, w).T
    return normalize_map(resized)


def label_components(binary: np.ndarray) -> Tuple[np.ndarray, int]:
    """4-connected component labels (0 = background) and their count."""
    labels, n = ndimage.label(binary, structure=_FOUR)
    return labels, n


def extract_box(score: np.ndarray, tau: float = DEFAULT_TAU) -> BoundingBox:
    """Tight box of the largest 4-connected region scoring at least ``tau``.

    The map is min-max normalized first, so the threshold is relative to
    the map's own range. Equal-area regions resolve to the smallest
    (y0, x0). With nothing above threshold the whole image is returned.
    """
    score = np.asarray(score, dtype=np.float64)
    height, width = score.shape
    norm = normalize_map(score)
    if norm.max() <= 0:
        return BoundingBox.full(height, width)
    labels, n = label_components(norm >= tau * norm.max())
    if n == 0:
        return BoundingBox.full(height, width)
    areas = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    slices = ndimage.find_objects(labels)
    best = min(range(n), key=lambda i: (-areas[i], slices[i][0].start, slices[i][1].start))
    ys, xs = slices[best]
    return BoundingBox(xs.start, ys.start, xs.stop, ys.stop)


def threshold_sweep_boxes(score: np.ndarray, taus: Sequence[float] = TAU_GRID) -> List[BoundingBox]:
    taus = list(taus)
    if not taus or any(not 0 < t < 1 for t in taus):
        raise ContractError(f"taus must be a nonempty list within (0, 1), got {taus}")
    return [extract_box(score, t) for t in taus]


def localize(cam, tau: float = DEFAULT_TAU, size: Union[int, Tuple[int, int]] = 64) -> BoundingBox:
    height, width = (size, size) if isinstance(size, int) else size
    return extract_box(upsample_cam(cam, height, width), tau)
