"""Domain types and rigid-transform algebra.

Rotation convention used everywhere in the package (and written into every
report): intrinsic x-y-z Euler angles, ``R = Rz(alpha_z) @ Ry(alpha_y) @
Rx(alpha_x)`` applied to column vectors. A point ``p`` in the movable sensor
frame maps to ``R @ p + t`` in the reference sensor frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

ROTATION_CONVENTION = "intrinsic x-y-z: R = Rz(alpha_z) @ Ry(alpha_y) @ Rx(alpha_x), p_ref = R @ p_mov + t"
PARAM_NAMES = ("alpha_x", "alpha_y", "alpha_z", "t_x", "t_y", "t_z")
ANGLE_SLICE = slice(0, 3)
TRANSLATION_SLICE = slice(3, 6)


class CalibrationError(Exception):
    """Base class for every recoverable pipeline failure."""


class NoDataError(CalibrationError):
    """An operation received (or produced) an empty point cloud."""


class InsufficientDataError(CalibrationError):
    """Too few points for the requested computation."""


class MissingAttributeError(CalibrationError):
    """A point attribute needed by a filter or estimator is absent."""

    def __init__(self, attribute: str):
        super().__init__(f"point cloud lacks required attribute '{attribute}'")
        self.attribute = attribute


class NoOverlapError(CalibrationError):
    """The reference and movable clouds do not overlap."""


class SceneUnsuitableError(CalibrationError):
    """Too few correspondences survive rejection."""


class RankDeficiencyError(CalibrationError):
    """The normal matrix is (numerically) singular.

    ``null_direction`` is a unit 6-vector over (alpha_x, alpha_y, alpha_z,
    t_x, t_y, t_z); entries for fixed parameters are zero.
    """

    def __init__(self, message: str, null_direction: np.ndarray, condition: float):
        super().__init__(message)
        self.null_direction = null_direction
        self.condition = condition


class UnderdeterminedError(CalibrationError):
    """Fewer observations than estimated unknowns."""


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]. Values already in range are returned untouched."""
    a = float(a)
    if -math.pi < a <= math.pi:
        return a
    a = math.remainder(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


def wrap_angles(a: np.ndarray) -> np.ndarray:
    """Vectorised ``normalize_angle`` for angle differences."""
    a = np.asarray(a, dtype=float)
    out = np.remainder(a + np.pi, 2.0 * np.pi) - np.pi
    out[out == -np.pi] = np.pi
    inside = (a > -np.pi) & (a <= np.pi)
    return np.where(inside, a, out)


@dataclass(frozen=True)
class Point:
    position: np.ndarray
    intensity: Optional[float] = None
    normal: Optional[np.ndarray] = None
    planarity: Optional[float] = None


@dataclass(frozen=True, eq=False)
class PointCloud:
    """A point cloud stored column-wise.

    Optional attributes are either ``None`` or arrays covering every point,
    so the attribute schema is uniform by construction.
    """

    positions: np.ndarray
    frame_id: str = "sensor"
    intensity: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    planarity: Optional[np.ndarray] = None
    acquired_at_site: Optional[int] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        n = len(pos)
        for name, shape in (("intensity", (n,)), ("normals", (n, 3)), ("planarity", (n,))):
            value = getattr(self, name)
            if value is None:
                continue
            arr = np.asarray(value, dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.normals is not None and n:
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ValueError("normals must be unit length")
        if self.planarity is not None and n:
            if np.any((self.planarity < 0.0) | (self.planarity > 1.0)):
                raise ValueError("planarity must lie in [0, 1]")
        if self.acquired_at_site is not None and self.acquired_at_site < 0:
            raise ValueError("acquired_at_site must be non-negative")

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Point:
        return Point(
            position=self.positions[i],
            intensity=None if self.intensity is None else float(self.intensity[i]),
            normal=None if self.normals is None else self.normals[i],
            planarity=None if self.planarity is None else float(self.planarity[i]),
        )

    def __iter__(self) -> Iterator[Point]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_points(cls, points: Sequence[Point], frame_id: str = "sensor", **kwargs) -> "PointCloud":
        points = list(points)
        attrs = {}
        for attr, key in (("intensity", "intensity"), ("normal", "normals"), ("planarity", "planarity")):
            present = [getattr(p, attr) is not None for p in points]
            if any(present) and not all(present):
                raise ValueError(f"attribute '{attr}' present on some points but not all")
            attrs[key] = [getattr(p, attr) for p in points] if points and all(present) else None
        return cls(
            positions=np.array([p.position for p in points], dtype=float).reshape(-1, 3),
            frame_id=frame_id,
            **attrs,
            **kwargs,
        )

    def subset(self, index) -> "PointCloud":
        """Return the points selected by an index array or boolean mask."""
        take = lambda a: None if a is None else a[index]  # noqa: E731
        return replace(
            self,
            positions=self.positions[index],
            intensity=take(self.intensity),
            normals=take(self.normals),
            planarity=take(self.planarity),
        )

    def with_attributes(self, **attrs) -> "PointCloud":
        return replace(self, **attrs)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not len(self):
            raise NoDataError("empty point cloud has no bounds")
        return self.positions.min(axis=0), self.positions.max(axis=0)


@dataclass(frozen=True)
class ExtrinsicParams:
    """Six extrinsic parameters; angles in radians, translations in meters."""

    alpha_x: float = 0.0
    alpha_y: float = 0.0
    alpha_z: float = 0.0
    t_x: float = 0.0
    t_y: float = 0.0
    t_z: float = 0.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = float(getattr(self, name))
            if name.startswith("alpha") and math.isfinite(value):
                value = normalize_angle(value)
            object.__setattr__(self, name, value)

    @classmethod
    def from_array(cls, values) -> "ExtrinsicParams":
        values = np.asarray(values, dtype=float).ravel()
        if values.shape != (6,):
            raise ValueError("expected 6 parameter values")
        return cls(*(float(v) for v in values))

    @classmethod
    def from_degrees(cls, ax, ay, az, tx, ty, tz) -> "ExtrinsicParams":
        return cls(math.radians(ax), math.radians(ay), math.radians(az), tx, ty, tz)

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    def to_degrees(self) -> tuple[float, ...]:
        a = self.to_array()
        return tuple(math.degrees(v) for v in a[:3]) + tuple(float(v) for v in a[3:])

    @property
    def rotation(self) -> np.ndarray:
        return compose_rotation(self.alpha_x, self.alpha_y, self.alpha_z)

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.t_x, self.t_y, self.t_z])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "ExtrinsicParams":
        ax, ay, az = rotation_to_euler(T[:3, :3])
        return cls(ax, ay, az, *T[:3, 3])


def _rx(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def compose_rotation(alpha_x: float, alpha_y: float, alpha_z: float) -> np.ndarray:
    """Rotation matrix ``Rz(alpha_z) @ Ry(alpha_y) @ Rx(alpha_x)``."""
    if not all(math.isfinite(a) for a in (alpha_x, alpha_y, alpha_z)):
        raise ValueError("rotation angles must be finite")
    return _rz(alpha_z) @ _ry(alpha_y) @ _rx(alpha_x)


def rotation_to_euler(R: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`compose_rotation`.

    At gimbal lock (``|alpha_y| = pi/2``) only the sum/difference of
    ``alpha_x`` and ``alpha_z`` is defined; ``alpha_x`` is set to zero.
    """
    R = np.asarray(R, dtype=float)
    sy = -R[2, 0]
    sy = min(1.0, max(-1.0, sy))
    ay = math.asin(sy)
    cy = math.hypot(R[0, 0], R[1, 0])
    if cy > 1e-9:
        ax = math.atan2(R[2, 1], R[2, 2])
        az = math.atan2(R[1, 0], R[0, 0])
    else:
        ax = 0.0
        # R[0,1] = s(ay)*s(ax)*c(az) - c(ax)*s(az), R[1,1] = s(ay)*s(ax)*s(az) + c(ax)*c(az)
        az = math.atan2(-R[0, 1], R[1, 1])
    return ax, ay, az


def apply_transform(cloud: PointCloud, params: ExtrinsicParams) -> PointCloud:
    """Map every point to ``R @ p + t`` and every normal to ``R @ n``."""
    if not len(cloud):
        raise NoDataError("cannot transform an empty point cloud")
    if params == ExtrinsicParams():
        return cloud
    R = params.rotation
    positions = cloud.positions @ R.T + params.translation
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ R.T
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return replace(cloud, positions=positions, normals=normals)


def transform_points(positions: np.ndarray, params: ExtrinsicParams) -> np.ndarray:
    return np.asarray(positions, dtype=float) @ params.rotation.T + params.translation


def invert_params(params: ExtrinsicParams) -> ExtrinsicParams:
    """Parameters of the inverse rigid transform."""
    R = params.rotation
    Rinv = R.T
    t = -Rinv @ params.translation
    ax, ay, az = rotation_to_euler(Rinv)
    return ExtrinsicParams(ax, ay, az, *t)


@dataclass(frozen=True)
class ParamPrior:
    """A priori observations of the six parameters.

    ``sigmas`` uses ``math.inf`` for an unconstrained component. Components
    with ``estimate_mask`` false are held at ``values``.
    """

    values: ExtrinsicParams = field(default_factory=ExtrinsicParams)
    sigmas: tuple = (math.inf,) * 6
    estimate_mask: tuple = (True,) * 6

    def __post_init__(self):
        sigmas = tuple(float(s) for s in self.sigmas)
        mask = tuple(bool(m) for m in self.estimate_mask)
        if len(sigmas) != 6 or len(mask) != 6:
            raise ValueError("sigmas and estimate_mask need 6 entries")
        for s in sigmas:
            if math.isnan(s) or s <= 0.0:
                raise ValueError("prior sigmas must be positive (inf = unconstrained)")
        values = self.values.to_array()
        for name, v, m in zip(PARAM_NAMES, values, mask):
            if not m and not math.isfinite(v):
                raise ValueError(f"fixed parameter {name} needs a finite prior value")
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "estimate_mask", mask)

    @classmethod
    def unconstrained(cls, values: Optional[ExtrinsicParams] = None, estimate_mask=(True,) * 6) -> "ParamPrior":
        return cls(values or ExtrinsicParams(), (math.inf,) * 6, estimate_mask)

    @property
    def sigma_array(self) -> np.ndarray:
        return np.array(self.sigmas, dtype=float)

    @property
    def mask_array(self) -> np.ndarray:
        return np.array(self.estimate_mask, dtype=bool)


@dataclass(frozen=True, eq=False)
class IterationStats:
    iteration: int
    num_correspondences: int
    sigma_d: float
    weighted_ssr_before: float
    weighted_ssr_after: float
    max_delta_angle: float
    max_delta_translation: float


@dataclass(frozen=True, eq=False)
class AdjustmentResult:
    """Outcome of one adjustment or one full ICP run.

    ``covariance`` rows/cols follow ``PARAM_NAMES``; fixed parameters carry
    zero rows and columns.
    """

    params: ExtrinsicParams
    covariance: np.ndarray
    residual_mean: float
    residual_std: float
    num_correspondences: int
    num_iterations: int
    converged: bool
    variance_factor: float = 1.0
    redundancy: int = 0
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: tuple = ()

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))
