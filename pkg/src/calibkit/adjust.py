"""Weighted least-squares adjustment of the six extrinsic parameters.

Two observation types are stacked:

* point-to-plane distances ``((R p + t) - q) . n``, weighted ``1 / sigma_d**2``
  with ``sigma_d`` a MAD-based robust scale;
* direct observations of the parameters themselves (the prior), weighted
  ``1 / sigma_i**2``.

Fixed parameters are removed from the unknown vector. The a posteriori
covariance is ``s0**2 * inv(A^T P A)`` embedded in a 6x6 matrix.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    ANGLE_SLICE,
    PARAM_NAMES,
    AdjustmentResult,
    ExtrinsicParams,
    ParamPrior,
    RankDeficiencyError,
    UnderdeterminedError,
    _rx,
    _ry,
    _rz,
    wrap_angles,
)

log = logging.getLogger(__name__)

MAD_TO_SIGMA = 1.4826
SIGMA_FLOOR = 1e-6
MAX_CONDITION = 1e10


def robust_sigma(distances: Sequence[float]) -> float:
    """``1.4826 * median(|d - median(d)|)``, floored at 1e-6."""
    d = np.asarray(distances, dtype=float).ravel()
    if not d.size:
        raise ValueError("robust_sigma needs at least one value")
    mad = np.median(np.abs(d - np.median(d)))
    sigma = MAD_TO_SIGMA * float(mad)
    return sigma if sigma > 0.0 else SIGMA_FLOOR


def point_to_plane_residual(params: ExtrinsicParams, p, q, n) -> float:
    p, q, n = (np.asarray(v, dtype=float) for v in (p, q, n))
    return float((params.rotation @ p + params.translation - q) @ n)


def point_to_plane_residuals(params: ExtrinsicParams, p: np.ndarray, q: np.ndarray, n: np.ndarray) -> np.ndarray:
    moved = p @ params.rotation.T + params.translation
    return np.einsum("ij,ij->i", moved - q, n)


def _d(c, s, axis):
    # derivative of the elementary rotation about ``axis`` w.r.t. its angle
    if axis == 0:
        return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])
    if axis == 1:
        return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def rotation_derivatives(params: ExtrinsicParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ax, ay, az = params.alpha_x, params.alpha_y, params.alpha_z
    Rx, Ry, Rz = _rx(ax), _ry(ay), _rz(az)
    dRx = _d(math.cos(ax), math.sin(ax), 0)
    dRy = _d(math.cos(ay), math.sin(ay), 1)
    dRz = _d(math.cos(az), math.sin(az), 2)
    return Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx


def point_to_plane_jacobian(params: ExtrinsicParams, p: np.ndarray, n: np.ndarray) -> np.ndarray:
    """(N, 6) partials of the point-to-plane residual."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    n = np.atleast_2d(np.asarray(n, dtype=float))
    J = np.empty((len(p), 6))
    for col, M in enumerate(rotation_derivatives(params)):
        J[:, col] = np.einsum("ij,ij->i", p @ M.T, n)
    J[:, 3:] = n
    return J


def jacobian_point_to_plane(params: ExtrinsicParams, p, q, n) -> np.ndarray:
    """Partials of one point-to-plane residual w.r.t. the six parameters.

    ``q`` does not enter the derivative; it is accepted so the signature
    mirrors :func:`point_to_plane_residual`.
    """
    return point_to_plane_jacobian(params, p, n)[0]


@dataclass(frozen=True, eq=False)
class ResidualBundle:
    """Everything one adjustment needs: correspondences, prior, robust scale.

    ``p`` are movable-sensor points in their own frame, ``q``/``n`` the
    matched reference points and reference normals.
    """

    p: np.ndarray
    q: np.ndarray
    n: np.ndarray
    prior: ParamPrior
    sigma_d: float

    def __post_init__(self):
        if not self.sigma_d > 0.0:
            raise ValueError("sigma_d must be positive")
        for name in ("p", "q", "n"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1, 3))
        if not len(self.p) == len(self.q) == len(self.n):
            raise ValueError("p, q, n must have equal length")

    @classmethod
    def from_correspondences(cls, corr, prior: ParamPrior, sigma_d: float) -> "ResidualBundle":
        return cls(corr.p, corr.q, corr.n, prior, sigma_d)

    def __len__(self) -> int:
        return len(self.p)


class _System:
    """Residuals and design matrix of the stacked model over the estimated subset."""

    def __init__(self, bundle: ResidualBundle):
        prior = bundle.prior
        self.bundle = bundle
        self.mask = prior.mask_array
        self.prior_values = prior.values.to_array()
        sig = prior.sigma_array
        self.prior_idx = np.flatnonzero(self.mask & np.isfinite(sig))
        self.prior_w = 1.0 / sig[self.prior_idx] ** 2
        self.point_w = 1.0 / bundle.sigma_d**2
        self.num_rows = len(bundle) + len(self.prior_idx)
        self.num_unknowns = int(self.mask.sum())

    def prior_residuals(self, x: np.ndarray) -> np.ndarray:
        diff = x - self.prior_values
        diff[ANGLE_SLICE] = wrap_angles(diff[ANGLE_SLICE])
        return diff[self.prior_idx]

    def evaluate(self, x: np.ndarray):
        params = ExtrinsicParams.from_array(x)
        b = self.bundle
        r_pt = point_to_plane_residuals(params, b.p, b.q, b.n)
        r_pr = self.prior_residuals(x)
        return params, r_pt, r_pr

    def ssr(self, x: np.ndarray) -> float:
        _, r_pt, r_pr = self.evaluate(x)
        return float(self.point_w * r_pt @ r_pt + self.prior_w @ (r_pr**2))

    def normal_equations(self, x: np.ndarray):
        params, r_pt, r_pr = self.evaluate(x)
        est = np.flatnonzero(self.mask)
        J = point_to_plane_jacobian(params, self.bundle.p, self.bundle.n)[:, est]
        N = self.point_w * (J.T @ J)
        g = self.point_w * (J.T @ r_pt)
        # prior rows have unit partials on their own parameter
        pos = np.searchsorted(est, self.prior_idx)
        N[pos, pos] += self.prior_w
        g[pos] += self.prior_w * r_pr
        return N, g, r_pt, r_pr


def _check_rank(N: np.ndarray, est: np.ndarray) -> None:
    evals, evecs = np.linalg.eigh(N)
    lmax, lmin = evals[-1], evals[0]
    cond = math.inf if lmin <= 0.0 else lmax / lmin
    if lmax > 0.0 and cond <= MAX_CONDITION:
        return
    direction = np.zeros(6)
    direction[est] = evecs[:, 0]
    k = int(np.argmax(np.abs(direction)))
    if direction[k] < 0:
        direction = -direction
    terms = [
        f"{direction[i]:+.3f}*{PARAM_NAMES[i]}"
        for i in np.argsort(-np.abs(direction))
        if abs(direction[i]) >= 0.1
    ]
    raise RankDeficiencyError(
        f"normal matrix condition {cond:.3g} exceeds {MAX_CONDITION:.0e}; "
        f"unobservable combination: {' '.join(terms)}",
        null_direction=direction,
        condition=cond,
    )


def solve_gauss_markov(
    bundle: ResidualBundle,
    linearization_point: ExtrinsicParams,
    max_iterations: int = 20,
    delta_angle: float = 1e-5,
    delta_translation: float = 1e-4,
) -> AdjustmentResult:
    """Iterated Gauss-Newton solution of the stacked weighted model.

    Raises :class:`UnderdeterminedError` when there are fewer rows than
    estimated unknowns and :class:`RankDeficiencyError` when the normal
    matrix condition number exceeds 1e10.
    """
    sys_ = _System(bundle)
    mask = sys_.mask
    est = np.flatnonzero(mask)
    x = linearization_point.to_array()
    x[~mask] = sys_.prior_values[~mask]

    redundancy = sys_.num_rows - sys_.num_unknowns
    if redundancy < 0:
        raise UnderdeterminedError(
            f"{sys_.num_rows} observations for {sys_.num_unknowns} unknowns"
        )

    iterations = 0
    converged = True
    if sys_.num_unknowns and len(bundle) == 0:
        # prior rows only: the least-squares solution is the prior itself
        N, _, _, _ = sys_.normal_equations(x)
        _check_rank(N, est)
        x[est] = sys_.prior_values[est]
    elif sys_.num_unknowns:
        converged = False
        ssr = sys_.ssr(x)
        for iterations in range(1, max_iterations + 1):
            N, g, _, _ = sys_.normal_equations(x)
            _check_rank(N, est)
            dx = -np.linalg.solve(N, g)
            step = np.zeros(6)
            step[est] = dx
            # backtrack only if a full step increases the objective
            for _ in range(8):
                trial = x + step
                trial_ssr = sys_.ssr(trial)
                if trial_ssr <= ssr * (1.0 + 1e-12) + 1e-300:
                    break
                step *= 0.5
            else:
                trial, trial_ssr = x, ssr
            x, ssr = trial, trial_ssr
            if (
                np.max(np.abs(step[ANGLE_SLICE]), initial=0.0) < delta_angle
                and np.max(np.abs(step[3:]), initial=0.0) < delta_translation
            ):
                converged = True
                break

    # masked entries of x were never stepped, so they still hold the prior bits
    params = ExtrinsicParams.from_array(x)

    covariance = np.zeros((6, 6))
    s0_sq = 1.0
    final_x = params.to_array()
    _, r_pt, r_pr = sys_.evaluate(final_x)
    if sys_.num_unknowns:
        N, _, r_pt, r_pr = sys_.normal_equations(final_x)
        _check_rank(N, est)
        wssr = float(sys_.point_w * r_pt @ r_pt + sys_.prior_w @ (r_pr**2))
        if redundancy > 0:
            s0_sq = wssr / redundancy
        if redundancy == 0 or s0_sq < 1e-12:
            s0_sq = 1.0
        Qxx = np.linalg.inv(N)
        Qxx = 0.5 * (Qxx + Qxx.T)
        covariance[np.ix_(est, est)] = s0_sq * Qxx

    return AdjustmentResult(
        params=params,
        covariance=covariance,
        residual_mean=float(np.mean(r_pt)) if len(r_pt) else 0.0,
        residual_std=float(np.std(r_pt)) if len(r_pt) else 0.0,
        num_correspondences=len(bundle),
        num_iterations=iterations,
        converged=converged,
        variance_factor=s0_sq,
        redundancy=redundancy,
        residuals=r_pt,
    )
