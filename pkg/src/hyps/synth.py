"""Synthetic ellipsoid-blob segmentation tasks.

Task A (pretraining proxy) has large, bright blobs anywhere in the volume.
Task B (fine-tuning proxy) has smaller, dimmer blobs confined to one corner
region and a raised background, so a model trained on A transfers poorly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .linalg import make_rng


@dataclass(frozen=True)
class SynthTask:
    task_id: str = "A"
    side: int = 16
    blob_count: tuple[int, int] = (1, 2)
    radius_range: tuple[float, float] = (3.0, 5.0)
    intensity: float = 1.0
    background: float = 0.0
    noise: float = 0.25
    # centres are drawn from [lo, hi) as a fraction of the side on every axis
    centre_range: tuple[float, float] = (0.25, 0.75)
    min_voxels: int = 20
    max_voxels: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.side < 4:
            raise ConfigError("volume side must be >= 4")
        lo, hi = self.blob_count
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad blob_count range {self.blob_count}")
        rlo, rhi = self.radius_range
        if not 0 < rlo <= rhi:
            raise ConfigError(f"bad radius_range {self.radius_range}")
        if not 0 < self.min_voxels <= self.max_voxels:
            raise ConfigError("need 0 < min_voxels <= max_voxels")

    def with_seed(self, seed: int) -> "SynthTask":
        return replace(self, seed=seed)


def task_a(seed: int = 0, side: int = 16) -> SynthTask:
    return SynthTask("A", side, (1, 2), (3.0, 5.0), 1.0, 0.0, 0.25, (0.25, 0.75), 20, 2000, seed)


def task_b(seed: int = 1, side: int = 16) -> SynthTask:
    return SynthTask("B", side, (1, 2), (2.0, 3.5), 0.55, 0.35, 0.25, (0.2, 0.55), 8, 1000, seed)


def expected_blob_volume(task: SynthTask) -> float:
    """Mean continuous ellipsoid volume times the mean blob count."""
    rlo, rhi = task.radius_range
    mean_r = 0.5 * (rlo + rhi)
    return 0.5 * (task.blob_count[0] + task.blob_count[1]) * 4.0 / 3.0 * np.pi * mean_r**3


def configured_volume_ratio(a: SynthTask, b: SynthTask) -> float:
    return expected_blob_volume(a) / expected_blob_volume(b)


def _one_sample(task: SynthTask, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = task.side
    grid = np.indices((s, s, s), dtype=np.float64)
    lo, hi = task.centre_range
    while True:
        label = np.zeros((s, s, s), dtype=bool)
        count = int(rng.integers(task.blob_count[0], task.blob_count[1] + 1))
        for _ in range(count):
            centre = rng.uniform(lo * s, hi * s, size=3)
            radii = rng.uniform(*task.radius_range, size=3)
            d2 = sum(((grid[ax] - centre[ax]) / radii[ax]) ** 2 for ax in range(3))
            label |= d2 <= 1.0
        noise = rng.standard_normal((s, s, s)) * task.noise
        voxels = int(label.sum())
        if task.min_voxels <= voxels <= task.max_voxels:
            break
    image = task.background + task.intensity * label + noise
    return image, label.astype(np.uint8)


def generate_dataset(task: SynthTask, n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` (image, label) pairs; the label is the exact union of blob supports."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    rng = make_rng(task.seed)
    return [_one_sample(task, rng) for _ in range(n)]
