"""Tests for normal estimation and FPFH descriptors."""

import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

sys.path.insert(0, str(Path(__file__).resolve().parent))

from assembly_pose.features import FPFH_BINS, FPFH_DIMENSION, FeatureError, compute_fpfh, estimate_normals
from assembly_pose.geometry import PointCloud, RigidTransform, apply


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (1.0 + 5.0 ** 0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def height_field(n: int, seed: int) -> np.ndarray:
    xy = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(n, 2))
    z = 0.15 * np.sin(3.0 * xy[:, 0]) * np.cos(2.0 * xy[:, 1]) + 0.05 * xy[:, 0] * xy[:, 1]
    return np.column_stack([xy, z])


def plane_grid(size: int = 20, spacing: float = 0.05) -> np.ndarray:
    u, v = np.meshgrid(np.arange(size) * spacing, np.arange(size) * spacing)
    return np.column_stack([u.ravel(), v.ravel(), np.zeros(u.size)])


def test_plane_normals_face_viewpoint():
    cloud = estimate_normals(PointCloud(plane_grid()), radius=0.12, max_nn=30, viewpoint=(0.0, 0.0, 1.0))
    assert np.allclose(cloud.normals, [0.0, 0.0, 1.0], atol=1e-6)
    assert not cloud.degenerate.any()


def test_sphere_normals_are_radial():
    points = fibonacci_sphere(20_000)
    cloud = estimate_normals(PointCloud(points), radius=0.06, max_nn=30, viewpoint=(0.0, 0.0, 10.0))
    cosine = np.abs(np.einsum("ij,ij->i", cloud.normals, points))
    assert cosine.min() >= np.cos(np.radians(2.0))
    toward = np.array([0.0, 0.0, 10.0]) - points
    assert np.all(np.einsum("ij,ij->i", cloud.normals, toward) >= 0.0)


def test_isolated_point_is_flagged():
    points = np.vstack([plane_grid(5, 0.01), [[5.0, 5.0, 5.0]]])
    cloud = estimate_normals(PointCloud(points), radius=0.03, max_nn=30, viewpoint=(0.0, 0.0, 1.0))
    assert cloud.degenerate[-1]
    assert np.allclose(cloud.normals[-1], [0.0, 0.0, 1.0])
    assert not cloud.degenerate[:-1].any()


def test_estimate_normals_input_errors():
    with pytest.raises(FeatureError):
        estimate_normals(PointCloud(np.zeros((0, 3))), radius=0.1)
    with pytest.raises(FeatureError):
        estimate_normals(PointCloud(np.zeros((3, 3))), radius=0.0)


def test_fpfh_requires_normals():
    with pytest.raises(FeatureError, match="normals required"):
        compute_fpfh(PointCloud(plane_grid()), radius=0.1)


def test_fpfh_isolated_point_is_zero():
    points = np.vstack([plane_grid(5, 0.01), [[5.0, 5.0, 5.0]]])
    cloud = estimate_normals(PointCloud(points), radius=0.03, viewpoint=(0.0, 0.0, 1.0))
    descriptors = compute_fpfh(cloud, radius=0.05)
    assert descriptors.shape == (len(points), FPFH_DIMENSION)
    assert np.all(descriptors[-1] == 0.0)


def test_fpfh_blocks_carry_equal_mass():
    cloud = estimate_normals(PointCloud(height_field(800, 0)), radius=0.2, viewpoint=(0.0, 0.0, 5.0))
    descriptors = compute_fpfh(cloud, radius=0.3)
    assert np.all(descriptors >= 0.0) and np.all(np.isfinite(descriptors))
    blocks = descriptors.reshape(-1, 3, FPFH_BINS).sum(axis=2)
    assert np.allclose(blocks[:, 0], blocks[:, 1]) and np.allclose(blocks[:, 1], blocks[:, 2])
    # own SPFH contributes exactly 100 per block
    assert np.all(blocks >= 100.0 - 1e-9)


def test_fpfh_is_rigid_invariant():
    points = height_field(2500, 1)
    viewpoint = np.array([0.0, 0.0, 5.0])
    t = RigidTransform(Rotation.random(random_state=3).as_matrix(), [0.3, -0.2, 0.7])

    original = estimate_normals(PointCloud(points), radius=0.15, max_nn=30, viewpoint=viewpoint)
    moved = estimate_normals(apply(t, PointCloud(points)), radius=0.15, max_nn=30,
                             viewpoint=t.transform_points(viewpoint)[0])
    a = compute_fpfh(original, radius=0.3, max_nn=100)
    b = compute_fpfh(moved, radius=0.3, max_nn=100)

    drift = np.abs(a - b).sum(axis=1) / np.abs(a).sum(axis=1)
    assert drift.max() <= 0.02
    assert drift.mean() <= 0.002


def test_fpfh_separates_plane_from_sphere():
    plane = plane_grid(25, 0.02)
    sphere = 0.3 * fibonacci_sphere(1500) + np.array([5.0, 0.0, 0.0])
    cloud = PointCloud(np.vstack([plane, sphere]))
    with_normals = estimate_normals(cloud, radius=0.06, viewpoint=(2.5, 0.0, 3.0))
    descriptors = compute_fpfh(with_normals, radius=0.1)
    p, s = descriptors[:len(plane)], descriptors[len(plane):]

    def mean_distance(x, y):
        return np.linalg.norm(x[:, None, :] - y[None, :, :], axis=2).mean()

    intra = 0.5 * (mean_distance(p[::5], p[::5]) + mean_distance(s[::5], s[::5]))
    assert mean_distance(p[::5], s[::5]) > intra


def test_fpfh_is_deterministic():
    cloud = estimate_normals(PointCloud(height_field(500, 2)), radius=0.2, viewpoint=(0.0, 0.0, 5.0))
    assert np.array_equal(compute_fpfh(cloud, radius=0.3), compute_fpfh(cloud, radius=0.3))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
