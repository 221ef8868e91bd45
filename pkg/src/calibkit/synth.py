"""Synthetic planar worlds with known ground truth.

Used as the oracle for recovery tests and to build replayable scenarios
(see :func:`twelve_sites_config`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import ExtrinsicParams, PointCloud, apply_transform, invert_params


@dataclass(frozen=True)
class PlaneSpec:
    center: tuple
    normal: tuple
    extent: tuple
    density: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("plane normal must be non-zero")
        if self.density <= 0:
            raise ValueError("plane density must be positive")
        if len(self.extent) != 2 or min(self.extent) <= 0:
            raise ValueError("extent needs two positive side lengths")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "normal", tuple(float(c) for c in n / norm))
        object.__setattr__(self, "extent", tuple(float(c) for c in self.extent))

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Two in-plane unit axes; the first is horizontal when possible."""
        n = np.asarray(self.normal)
        ref = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(ref, n)
        u /= np.linalg.norm(u)
        return u, np.cross(n, u)

    @property
    def expected_count(self) -> float:
        return self.extent[0] * self.extent[1] * self.density


@dataclass(frozen=True)
class SceneSpec:
    planes: Sequence[PlaneSpec]
    clutter_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not len(self.planes):
            raise ValueError("a scene needs at least one plane")
        if not 0.0 <= self.clutter_fraction < 1.0:
            raise ValueError("clutter_fraction must lie in [0, 1)")
        object.__setattr__(self, "planes", tuple(self.planes))

    @classmethod
    def from_dict(cls, d: dict, seed: int | None = None) -> "SceneSpec":
        planes = [PlaneSpec(**p) for p in d["planes"]]
        return cls(planes, d.get("clutter_fraction", 0.0), d.get("seed", 0) if seed is None else seed)


def _sample_plane(plane: PlaneSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    u, v = plane.basis()
    a = rng.uniform(-0.5, 0.5, count) * plane.extent[0]
    b = rng.uniform(-0.5, 0.5, count) * plane.extent[1]
    return np.asarray(plane.center) + a[:, None] * u + b[:, None] * v


def generate_scene(spec: SceneSpec, frame_id: str = "world", return_labels: bool = False):
    """Sample every plane uniformly plus isotropic clutter.

    The total count is the expected plane count inflated by
    ``1 / (1 - clutter_fraction)``; each point is clutter with probability
    ``clutter_fraction`` and plane points are shared among planes by a
    multinomial draw weighted by area times density. With
    ``return_labels=True`` the plane index per point is returned as well
    (``-1`` for clutter).
    """
    rng = np.random.default_rng(spec.seed)
    expected = np.array([p.expected_count for p in spec.planes])
    total = int(round(expected.sum() / (1.0 - spec.clutter_fraction)))
    n_clutter = int(rng.binomial(total, spec.clutter_fraction)) if spec.clutter_fraction else 0
    counts = rng.multinomial(total - n_clutter, expected / expected.sum())
    chunks, labels = [], []
    for i, (plane, c) in enumerate(zip(spec.planes, counts)):
        chunks.append(_sample_plane(plane, int(c), rng))
        labels.append(np.full(int(c), i))
    planes_pts = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    if n_clutter:
        lo, hi = planes_pts.min(axis=0), planes_pts.max(axis=0)
        chunks.append(rng.uniform(lo, hi, size=(n_clutter, 3)))
        labels.append(np.full(n_clutter, -1))
    cloud = PointCloud(np.concatenate(chunks), frame_id=frame_id)
    if return_labels:
        return cloud, np.concatenate(labels)
    return cloud


def render_view(
    world: PointCloud,
    sensor_pose: ExtrinsicParams,
    noise_sigma: float,
    max_range: float = math.inf,
    seed: int = 0,
    frame_id: str = "sensor",
) -> PointCloud:
    """Express the world in a sensor frame, cut at ``max_range`` and add noise.

    ``sensor_pose`` maps sensor coordinates to world coordinates.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    view = apply_transform(world, invert_params(sensor_pose))
    keep = np.linalg.norm(view.positions, axis=1) <= max_range
    positions = view.positions[keep]
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        positions = positions + rng.normal(0.0, noise_sigma, positions.shape)
    return PointCloud(
        positions,
        frame_id=frame_id,
        intensity=None if view.intensity is None else view.intensity[keep],
        acquired_at_site=world.acquired_at_site,
    )


def perturb(params: ExtrinsicParams, angle_mag: float, trans_mag: float, seed: int = 0) -> ExtrinsicParams:
    """Offset each angle by U(-angle_mag, angle_mag) and each translation by U(-trans_mag, trans_mag)."""
    if angle_mag < 0 or trans_mag < 0:
        raise ValueError("magnitudes must be non-negative")
    rng = np.random.default_rng(seed)
    da = rng.uniform(-1.0, 1.0, 3) * angle_mag
    dt = rng.uniform(-1.0, 1.0, 3) * trans_mag
    x = params.to_array() + np.concatenate([da, dt])
    return ExtrinsicParams.from_array(x)


def corner_scene(size: float = 10.0, points_per_side: int = 10_000, offset=(8.0, 8.0, -1.5), seed: int = 0, clutter_fraction: float = 0.0) -> SceneSpec:
    """Three mutually orthogonal square planes meeting at ``offset``.

    The walls face the origin, so a sensor near the origin looks into the
    corner.
    """
    ox, oy, oz = offset
    h = size / 2.0
    density = points_per_side / size**2
    planes = [
        PlaneSpec((ox, oy - h, oz + h), (-1.0, 0.0, 0.0), (size, size), density),
        PlaneSpec((ox - h, oy, oz + h), (0.0, -1.0, 0.0), (size, size), density),
        PlaneSpec((ox - h, oy - h, oz), (0.0, 0.0, 1.0), (size, size), density),
    ]
    return SceneSpec(planes, clutter_fraction, seed)


def twelve_sites_config() -> dict:
    """The shipped ``twelve_sites`` scenario description (plain dict, TOML-ready)."""
    from importlib import resources

    from .io import load_toml_text

    text = resources.files("calibkit.data").joinpath("twelve_sites.toml").read_text()
    return load_toml_text(text)
