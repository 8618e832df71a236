"""Segmentation scores and post-processing for 3-D binary masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ShapeError, UndefinedMetricError

DEFAULT_MIN_COMPONENT = 1000


@dataclass(frozen=True)
class BinaryMask:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.voxels).astype(bool)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ShapeError(f"mask must be a non-empty 3-D array, got shape {v.shape}")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or min(sp) <= 0:
            raise ShapeError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", sp)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def count(self) -> int:
        return int(self.voxels.sum())


def as_mask(m, spacing=(1.0, 1.0, 1.0)) -> BinaryMask:
    return m if isinstance(m, BinaryMask) else BinaryMask(m, spacing)


def _check_pair(a: BinaryMask, b: BinaryMask) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"mask dims differ: {a.dims} vs {b.dims}")
    if a.spacing != b.spacing:
        raise ShapeError(f"mask spacings differ: {a.spacing} vs {b.spacing}")


def dice_score(a, b) -> float:
    """2|A and B| / (|A| + |B|) in percent; 100 when both masks are empty."""
    a, b = as_mask(a), as_mask(b)
    _check_pair(a, b)
    total = a.count + b.count
    if total == 0:
        return 100.0
    inter = int(np.logical_and(a.voxels, b.voxels).sum())
    return 200.0 * inter / total


def surface_voxels(mask) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour outside the mask.

    Returns an (N, 3) integer index array. Outside the volume counts as
    background.
    """
    v = as_mask(mask).voxels
    padded = np.pad(v, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(v & ~interior)


def directed_hd95(src: np.ndarray, dst: np.ndarray, spacing) -> float:
    """Nearest-rank 95th percentile of min distances from src points to dst."""
    sp = np.asarray(spacing, dtype=np.float64)
    tree = cKDTree(dst * sp)
    dists, _ = tree.query(src * sp, k=1)
    dists = np.sort(np.atleast_1d(dists))
    rank = int(np.ceil(0.95 * dists.size))
    return float(dists[rank - 1])


def hd95(a, b) -> float:
    """Symmetric 95th-percentile surface distance in physical units (mm)."""
    a, b = as_mask(a), as_mask(b)
    _check_pair(a, b)
    if a.count == 0 or b.count == 0:
        raise UndefinedMetricError("HD95 is undefined when either mask is empty")
    sa, sb = surface_voxels(a), surface_voxels(b)
    return max(directed_hd95(sa, sb, a.spacing), directed_hd95(sb, sa, a.spacing))


def label_components(mask) -> tuple[np.ndarray, np.ndarray]:
    """26-connected labelling; returns (labels, counts) with counts[0] unused."""
    m = as_mask(mask)
    labels, n = ndimage.label(m.voxels, structure=np.ones((3, 3, 3), dtype=bool))
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    counts[0] = 0
    return labels, counts


def filter_small_components(mask, min_voxels: int = DEFAULT_MIN_COMPONENT) -> BinaryMask:
    """Drop 26-connected components with fewer than ``min_voxels`` voxels."""
    m = as_mask(mask)
    labels, counts = label_components(m)
    keep = counts >= min_voxels
    keep[0] = False
    return BinaryMask(keep[labels], m.spacing)


def measure_volume(mask) -> float:
    """Foreground volume in cm^3 (voxel count times voxel volume in mm^3 / 1000)."""
    m = as_mask(mask)
    sx, sy, sz = m.spacing
    return m.count * sx * sy * sz / 1000.0
