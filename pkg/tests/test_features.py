import numpy as np
import pytest

from calibkit.core import ExtrinsicParams, InsufficientDataError, PointCloud, apply_transform
from calibkit.features import NeighborhoodConfig, estimate_normals_planarity
from oracles import brute_force_planarity


def unit_square_grid(n=10, z=-1.0):
    g = np.linspace(0.0, 1.0, n)
    X, Y = np.meshgrid(g, g)
    return np.c_[X.ravel(), Y.ravel(), np.full(n * n, z)]


def test_plane_normals_and_planarity_match_oracle():
    pts = unit_square_grid()
    out = estimate_normals_planarity(PointCloud(pts), NeighborhoodConfig(10))
    np.testing.assert_allclose(np.abs(out.normals[:, 2]), 1.0, atol=1e-6)
    oracle, _ = brute_force_planarity(pts, 10)
    np.testing.assert_allclose(out.planarity, oracle, atol=1e-12)


def test_symmetric_plane_neighbourhood_reaches_one():
    # interior grid points with k=9 see a full 3x3 block: l1 == l2, l3 == 0
    pts = unit_square_grid()
    out = estimate_normals_planarity(PointCloud(pts), NeighborhoodConfig(9))
    interior = (pts[:, 0] > 0.05) & (pts[:, 0] < 0.95) & (pts[:, 1] > 0.05) & (pts[:, 1] < 0.95)
    assert np.all(out.planarity[interior] > 0.9)
    np.testing.assert_allclose(out.planarity[interior], 1.0, atol=1e-9)


def test_isotropic_ball_has_low_planarity():
    rng = np.random.default_rng(3)
    n = 4000
    d = rng.normal(size=(n, 3))
    pts = d / np.linalg.norm(d, axis=1)[:, None] * rng.uniform(0, 1, n)[:, None] ** (1 / 3) + [5, 0, 0]
    # the whole ball as one neighbourhood: Monte-Carlo eigenvalues are nearly equal
    w = np.sort(np.linalg.eigvalsh(np.cov(pts.T)))[::-1]
    assert (w[1] - w[2]) / w[0] < 0.1
    out = estimate_normals_planarity(PointCloud(pts), NeighborhoodConfig(n))
    assert np.all(out.planarity < 0.1)


def test_three_points_exact_plane():
    pts = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 2.0], [0.0, 0.0, 3.0]])
    out = estimate_normals_planarity(PointCloud(pts), NeighborhoodConfig(3))
    normal = np.cross(pts[1] - pts[0], pts[2] - pts[0])
    normal /= np.linalg.norm(normal)
    for nrm in out.normals:
        assert abs(nrm @ (pts[1] - pts[0])) < 1e-9 and abs(nrm @ (pts[2] - pts[0])) < 1e-9
        assert abs(abs(nrm @ normal) - 1.0) < 1e-9
    assert np.all((0 <= out.planarity) & (out.planarity <= 1))


def test_too_few_points():
    with pytest.raises(InsufficientDataError):
        estimate_normals_planarity(PointCloud(np.zeros((5, 3))), NeighborhoodConfig(10))


def test_k_below_three_rejected():
    with pytest.raises(ValueError):
        NeighborhoodConfig(2)


def test_coincident_neighbourhood_is_degenerate():
    pts = np.vstack([np.zeros((10, 3)) + [1, 1, 1], unit_square_grid(4)])
    out = estimate_normals_planarity(PointCloud(pts), NeighborhoodConfig(5))
    assert np.all(out.planarity[:10] == 0.0)
    np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0)


def test_normals_face_sensor_origin():
    rng = np.random.default_rng(4)
    pts = np.c_[rng.uniform(-5, 5, (500, 2)), np.full(500, -2.0)]
    walls = np.c_[np.full(500, 6.0), rng.uniform(-5, 5, (500, 2))]
    out = estimate_normals_planarity(PointCloud(np.vstack([pts, walls])))
    assert np.all(np.einsum("ij,ij->i", out.normals, -out.positions) >= 0)
    np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-12)


def test_planarity_invariant_under_rigid_motion():
    rng = np.random.default_rng(5)
    pts = np.c_[rng.uniform(-3, 3, (800, 2)), 0.05 * rng.normal(size=800)] + [0, 0, -2]
    cloud = PointCloud(pts)
    g = ExtrinsicParams(0.3, -0.2, 1.1, 4, -2, 1)
    a = estimate_normals_planarity(cloud).planarity
    b = estimate_normals_planarity(apply_transform(cloud, g)).planarity
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_radius_limits_neighbourhood():
    pts = np.vstack([unit_square_grid(5), [[50.0, 50.0, 50.0]]])
    out = estimate_normals_planarity(PointCloud(pts), NeighborhoodConfig(5, max_radius=1.0))
    # the isolated point has no neighbours within 1 m
    assert out.planarity[-1] == 0.0
