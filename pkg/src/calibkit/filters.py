"""Pre-matching filter stack.

Stages run in a fixed order (range, intensity, planarity, voxel). Extra
sensor-specific stages can be appended by name through :class:`FilterStack`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import MissingAttributeError, NoDataError, PointCloud

# a stage maps (cloud, cfg) to a boolean keep-mask or an index array
FilterStage = Callable[[PointCloud, "FilterConfig"], np.ndarray]


@dataclass(frozen=True)
class FilterConfig:
    min_range: float = 0.5
    max_range: float = 60.0
    min_intensity: Optional[float] = None
    voxel_size: Optional[float] = 0.2
    min_planarity: Optional[float] = 0.3

    def __post_init__(self):
        if not self.min_range < self.max_range:
            raise ValueError("min_range must be below max_range")
        if self.voxel_size is not None and self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.min_planarity is not None and not 0.0 <= self.min_planarity <= 1.0:
            raise ValueError("min_planarity must lie in [0, 1]")


def range_stage(cloud: PointCloud, cfg: FilterConfig) -> np.ndarray:
    r = np.linalg.norm(cloud.positions, axis=1)
    return (r >= cfg.min_range) & (r <= cfg.max_range)


def intensity_stage(cloud: PointCloud, cfg: FilterConfig) -> np.ndarray:
    if cfg.min_intensity is None:
        return np.ones(len(cloud), dtype=bool)
    if cloud.intensity is None:
        raise MissingAttributeError("intensity")
    return cloud.intensity >= cfg.min_intensity


def planarity_stage(cloud: PointCloud, cfg: FilterConfig) -> np.ndarray:
    if not cfg.min_planarity:
        return np.ones(len(cloud), dtype=bool)
    if cloud.planarity is None:
        raise MissingAttributeError("planarity")
    return cloud.planarity >= cfg.min_planarity


def voxel_keep_indices(positions: np.ndarray, voxel_size: float, origin=None) -> np.ndarray:
    """One index per occupied voxel: the point closest to the voxel's point centroid.

    Ties go to the lowest index. The result is sorted.
    """
    if not len(positions):
        return np.zeros(0, dtype=int)
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
    keys = np.floor((positions - origin) / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, positions)
    centroids = sums / counts[:, None]
    d2 = np.sum((positions - centroids[inverse]) ** 2, axis=1)
    order = np.lexsort((np.arange(len(positions)), d2, inverse))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order[1:]] != inverse[order[:-1]]
    return np.sort(order[first])


def voxel_stage(cloud: PointCloud, cfg: FilterConfig) -> np.ndarray:
    if cfg.voxel_size is None:
        return np.arange(len(cloud))
    return voxel_keep_indices(cloud.positions, cfg.voxel_size)


class FilterStack:
    """An ordered list of named filter stages."""

    def __init__(self, stages=None):
        if stages is None:
            stages = [
                ("range", range_stage),
                ("intensity", intensity_stage),
                ("planarity", planarity_stage),
                ("voxel", voxel_stage),
            ]
        self.stages: list[tuple[str, FilterStage]] = list(stages)

    def register(self, name: str, stage: FilterStage, before: Optional[str] = None) -> None:
        if any(n == name for n, _ in self.stages):
            raise ValueError(f"stage '{name}' already registered")
        if before is None:
            self.stages.append((name, stage))
            return
        names = [n for n, _ in self.stages]
        self.stages.insert(names.index(before), (name, stage))

    def __call__(self, cloud: PointCloud, cfg: FilterConfig) -> PointCloud:
        for name, stage in self.stages:
            if not len(cloud):
                break
            cloud = cloud.subset(stage(cloud, cfg))
        if not len(cloud):
            raise NoDataError("all points removed by the filter stack")
        return cloud


def apply_filters(cloud: PointCloud, cfg: FilterConfig = FilterConfig(), stack: Optional[FilterStack] = None) -> PointCloud:
    """Reduce a cloud to the points passing every active filter."""
    if not len(cloud):
        raise NoDataError("cannot filter an empty point cloud")
    return (stack or FilterStack())(cloud, cfg)
