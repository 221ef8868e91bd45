"""Per-point normal and planarity estimation from k-nearest neighborhoods."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import InsufficientDataError, PointCloud


@dataclass(frozen=True)
class NeighborhoodConfig:
    k_neighbors: int = 10
    max_radius: Optional[float] = None

    def __post_init__(self):
        if self.k_neighbors < 3:
            raise ValueError("k_neighbors must be >= 3")
        if self.max_radius is not None and self.max_radius <= 0:
            raise ValueError("max_radius must be positive")


def knn_indices(positions: np.ndarray, k: int, max_radius: Optional[float] = None):
    """Indices of the ``k`` nearest neighbours of every point (self included).

    Equal distances are ordered by point index. Neighbours beyond
    ``max_radius`` are returned as index ``-1``.
    """
    n = len(positions)
    tree = cKDTree(positions)
    # query a little deeper so ties straddling the k-th slot resolve by index
    kq = min(n, k + 2)
    bound = np.inf if max_radius is None else float(max_radius)
    dist, idx = tree.query(positions, k=kq, distance_upper_bound=bound)
    dist = dist.reshape(n, kq)
    idx = idx.reshape(n, kq)
    missing = ~np.isfinite(dist)
    idx = np.where(missing, n, idx)
    order = np.lexsort((idx, dist), axis=1)
    idx = np.take_along_axis(idx, order, axis=1)[:, :k]
    idx = np.where(idx >= n, -1, idx)
    return idx


def neighborhood_eigen(positions: np.ndarray, neighbors: np.ndarray):
    """Eigenvalues (descending) and smallest-eigenvalue eigenvectors per point."""
    valid = neighbors >= 0
    safe = np.where(valid, neighbors, 0)
    pts = positions[safe]
    w = valid.astype(float)[..., None]
    count = w.sum(axis=1)
    mean = (pts * w).sum(axis=1) / np.maximum(count, 1.0)
    centered = (pts - mean[:, None, :]) * w
    cov = np.einsum("nki,nkj->nij", centered, centered) / np.maximum(count, 1.0)[..., None]
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[:, ::-1], 0.0, None)
    return evals, evecs[:, :, 0], count[:, 0]


def planarity_from_eigenvalues(evals: np.ndarray) -> np.ndarray:
    """``(l2 - l3) / l1`` for descending eigenvalues, 0 where ``l1 == 0``."""
    l1, l2, l3 = evals[:, 0], evals[:, 1], evals[:, 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(l1 > 0.0, (l2 - l3) / l1, 0.0)
    return np.clip(p, 0.0, 1.0)


def estimate_normals_planarity(cloud: PointCloud, cfg: NeighborhoodConfig = NeighborhoodConfig()) -> PointCloud:
    """Attach unit normals and planarity to every point.

    Normals are oriented toward the origin of the cloud's own frame.
    Neighbourhoods with fewer than three valid points or no spread get
    planarity 0 and the normal +z (oriented).
    """
    n = len(cloud)
    if n < cfg.k_neighbors:
        raise InsufficientDataError(f"need at least {cfg.k_neighbors} points, cloud has {n}")
    pos = cloud.positions
    neighbors = knn_indices(pos, cfg.k_neighbors, cfg.max_radius)
    evals, normals, count = neighborhood_eigen(pos, neighbors)
    planarity = planarity_from_eigenvalues(evals)

    degenerate = (evals[:, 0] <= 0.0) | (count < 3)
    planarity[degenerate] = 0.0
    normals[degenerate] = (0.0, 0.0, 1.0)

    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    flip = np.einsum("ij,ij->i", normals, -pos) < 0.0
    normals[flip] *= -1.0
    return cloud.with_attributes(normals=normals, planarity=planarity)
