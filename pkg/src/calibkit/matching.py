"""Correspondence search and the ICP outer loop.

Selection runs once per calibration; matching, rejection, adjustment and
transformation repeat until the parameter updates drop below the
convergence thresholds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .adjust import ResidualBundle, point_to_plane_residuals, robust_sigma, solve_gauss_markov
from .core import (
    AdjustmentResult,
    ExtrinsicParams,
    IterationStats,
    MissingAttributeError,
    NoDataError,
    NoOverlapError,
    ParamPrior,
    PointCloud,
    SceneUnsuitableError,
    transform_points,
    wrap_angles,
)
from .filters import voxel_keep_indices

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MatchConfig:
    num_selected: int = 2000
    max_distance_factor: float = 3.0
    max_normal_angle: float = math.radians(30.0)
    max_iterations: int = 50
    convergence_delta_angle: float = 1e-5
    convergence_delta_translation: float = 1e-4
    min_correspondences: int = 100

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Correspondence:
    ref_index: int
    mov_index: int
    q: np.ndarray
    n: np.ndarray
    p: np.ndarray
    signed_distance: float


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Column-wise set of correspondences; indexing yields :class:`Correspondence`."""

    ref_index: np.ndarray
    mov_index: np.ndarray
    q: np.ndarray
    n: np.ndarray
    p: np.ndarray
    signed_distance: np.ndarray

    def __len__(self) -> int:
        return len(self.ref_index)

    def __getitem__(self, i: int) -> Correspondence:
        return Correspondence(
            int(self.ref_index[i]),
            int(self.mov_index[i]),
            self.q[i],
            self.n[i],
            self.p[i],
            float(self.signed_distance[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def subset(self, keep) -> "Correspondences":
        return Correspondences(*(getattr(self, f)[keep] for f in self.__dataclass_fields__))

    def recompute(self, params: ExtrinsicParams) -> "Correspondences":
        return replace(self, signed_distance=point_to_plane_residuals(params, self.p, self.q, self.n))


def _occupied_voxels(points: np.ndarray, size: float, origin: np.ndarray) -> int:
    keys = np.floor((points - origin) / size).astype(np.int64)
    return len(np.unique(keys, axis=0))


def select_uniform(ref_cloud: PointCloud, mov_bounds: tuple, cfg: MatchConfig = MatchConfig()) -> np.ndarray:
    """Pick up to ``num_selected`` reference points spread evenly over the overlap.

    ``mov_bounds`` is the (lower, upper) corner pair of the movable cloud in
    the reference frame. The voxel edge is bisected so the number of occupied
    voxels is the largest not exceeding ``num_selected``; one point per voxel
    is kept and the overlap box is grown by one voxel edge.
    """
    if not len(ref_cloud):
        raise NoDataError("reference cloud is empty")
    lo, hi = (np.asarray(b, dtype=float) for b in mov_bounds)
    pos = ref_cloud.positions

    def candidates(margin: float) -> np.ndarray:
        inside = np.all((pos >= lo - margin) & (pos <= hi + margin), axis=1)
        return np.flatnonzero(inside)

    if not len(candidates(0.0)):
        raise NoOverlapError("reference cloud does not overlap the movable cloud's bounding box")

    diag = float(np.linalg.norm(np.maximum(hi, pos.max(axis=0)) - np.minimum(lo, pos.min(axis=0))))
    origin = lo
    # once every candidate has its own voxel, finer voxels change nothing
    small, large = diag * 1e-6, max(diag, 1e-9)
    best = None
    for _ in range(60):
        size = math.sqrt(small * large)
        idx = candidates(size)
        count = _occupied_voxels(pos[idx], size, origin)
        if count <= cfg.num_selected:
            best = (size, idx)
            large = size
        else:
            small = size
        if large / small < 1.0 + 1e-3:
            break
    if best is None:
        size = large
        best = (size, candidates(size))
    size, idx = best
    if len(idx) <= cfg.num_selected:
        return idx
    keep = voxel_keep_indices(pos[idx], size, origin)
    return idx[keep]


def match_nn(
    selected: Sequence[int],
    ref_cloud: PointCloud,
    mov_cloud: PointCloud,
    current_params: ExtrinsicParams,
    tree: cKDTree | None = None,
) -> Correspondences:
    """Nearest movable point (after transformation) for every selected reference point."""
    if not len(mov_cloud):
        raise NoDataError("movable cloud is empty")
    if ref_cloud.normals is None:
        raise MissingAttributeError("normals")
    selected = np.asarray(selected, dtype=int)
    moved = transform_points(mov_cloud.positions, current_params)
    if tree is None:
        tree = cKDTree(moved)
    q = ref_cloud.positions[selected]
    _, mov_idx = tree.query(q, k=1)
    mov_idx = np.asarray(mov_idx, dtype=int).reshape(-1)
    n = ref_cloud.normals[selected]
    p = mov_cloud.positions[mov_idx]
    d = np.einsum("ij,ij->i", moved[mov_idx] - q, n)
    return Correspondences(selected, mov_idx, q, n, p, d)


def reject(
    correspondences: Correspondences,
    mov_normals: np.ndarray,
    cfg: MatchConfig = MatchConfig(),
    current_params: ExtrinsicParams = ExtrinsicParams(),
) -> Correspondences:
    """Drop correspondences failing the robust distance gate or the normal-angle gate."""
    if mov_normals is None:
        raise MissingAttributeError("normals")
    if not len(correspondences):
        raise SceneUnsuitableError("no correspondences to reject from")
    d = correspondences.signed_distance
    sigma = robust_sigma(d)
    dist_ok = np.abs(d - np.median(d)) <= cfg.max_distance_factor * sigma
    n_mov = np.asarray(mov_normals)[correspondences.mov_index] @ current_params.rotation.T
    cosang = np.einsum("ij,ij->i", correspondences.n, n_mov)
    angle_ok = cosang >= math.cos(cfg.max_normal_angle)
    kept = correspondences.subset(dist_ok & angle_ok)
    if len(kept) < cfg.min_correspondences:
        raise SceneUnsuitableError(
            f"{len(kept)} correspondences survive rejection, need {cfg.min_correspondences}"
        )
    return kept


def _max_deltas(a: ExtrinsicParams, b: ExtrinsicParams) -> tuple[float, float]:
    diff = b.to_array() - a.to_array()
    dang = float(np.max(np.abs(wrap_angles(diff[:3]))))
    dtr = float(np.max(np.abs(diff[3:])))
    return dang, dtr


def run_icp(
    ref_cloud: PointCloud,
    mov_cloud: PointCloud,
    initial: ExtrinsicParams,
    prior: ParamPrior,
    match_cfg: MatchConfig = MatchConfig(),
) -> AdjustmentResult:
    """Estimate the movable-to-reference transform by point-to-plane ICP.

    Returns ``converged=False`` instead of raising when ``max_iterations``
    is exhausted. Selection, rejection and adjustment errors propagate.
    """
    if ref_cloud.normals is None or mov_cloud.normals is None:
        raise MissingAttributeError("normals")
    if not len(ref_cloud) or not len(mov_cloud):
        raise NoDataError("both clouds must be non-empty")
    mask = prior.mask_array
    x0 = initial.to_array()
    x0[~mask] = prior.values.to_array()[~mask]
    params = ExtrinsicParams.from_array(x0)

    moved = transform_points(mov_cloud.positions, params)
    selected = select_uniform(ref_cloud, (moved.min(axis=0), moved.max(axis=0)), match_cfg)
    log.debug("selected %d reference points", len(selected))

    stats = []
    converged = False
    result = None
    kept = None
    for iteration in range(1, match_cfg.max_iterations + 1):
        corr = match_nn(selected, ref_cloud, mov_cloud, params)
        kept = reject(corr, mov_cloud.normals, match_cfg, params)
        sigma_d = robust_sigma(kept.signed_distance)
        bundle = ResidualBundle.from_correspondences(kept, prior, sigma_d)
        result = solve_gauss_markov(
            bundle,
            params,
            delta_angle=match_cfg.convergence_delta_angle,
            delta_translation=match_cfg.convergence_delta_translation,
        )
        w = 1.0 / sigma_d**2
        before = float(w * kept.signed_distance @ kept.signed_distance)
        after = float(w * result.residuals @ result.residuals)
        dang, dtr = _max_deltas(params, result.params)
        stats.append(IterationStats(iteration, len(kept), sigma_d, before, after, dang, dtr))
        log.debug(
            "icp iter %d: n=%d sigma_d=%.4g dang=%.3g dtr=%.3g", iteration, len(kept), sigma_d, dang, dtr
        )
        params = result.params
        if dang < match_cfg.convergence_delta_angle and dtr < match_cfg.convergence_delta_translation:
            converged = True
            break

    return replace(result, num_iterations=len(stats), converged=converged, iterations=tuple(stats))
