"""Tests for voxel downsampling, feature matching, RANSAC, ICP and the full registration."""

import math
import os
import sys
from pathlib import Path

import numpy as np
import pytest
import trimesh
from scipy.spatial.transform import Rotation

sys.path.insert(0, str(Path(__file__).resolve().parent))

from assembly_pose.geometry import (
    PointCloud,
    RigidTransform,
    TriangleMesh,
    apply,
    merge_meshes,
    sample_mesh_surface,
)
from assembly_pose import registration
from assembly_pose.registration import (
    RegistrationError,
    RegistrationResult,
    evaluate_alignment,
    icp_point_to_plane,
    match_features,
    ransac_global,
    register,
    voxel_downsample,
)
from assembly_pose.schemas import RegistrationParams


def identity_pairs(n: int) -> np.ndarray:
    return np.stack([np.arange(n), np.arange(n)], axis=1)


def box_sample(n: int = 2000, seed: int = 0) -> PointCloud:
    box = TriangleMesh.from_trimesh(trimesh.creation.box(extents=[0.1, 0.08, 0.06]))
    return sample_mesh_surface(box, n, seed=seed)


def box_and_cylinder() -> TriangleMesh:
    box = TriangleMesh.from_trimesh(trimesh.creation.box(extents=[0.1, 0.06, 0.04]))
    cylinder = TriangleMesh.from_trimesh(trimesh.creation.cylinder(radius=0.015, height=0.05, sections=48))
    return merge_meshes([box, cylinder.transformed(RigidTransform.from_translation([0.03, 0.01, 0.045]))])


# ============================================================================
# Downsampling and matching
# ============================================================================

def test_voxel_downsample_averages_each_voxel():
    cloud = PointCloud(np.array([[0.001, 0.001, 0.001], [0.003, 0.002, 0.001], [0.05, 0.0, 0.0]]))
    down = voxel_downsample(cloud, 0.01)
    assert np.allclose(down.points, [[0.002, 0.0015, 0.001], [0.05, 0.0, 0.0]])


def test_voxel_downsample_normals():
    points = np.array([[0.001, 0.0, 0.0], [0.002, 0.0, 0.0], [0.05, 0.0, 0.0], [0.051, 0.0, 0.0]])
    normals = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    down = voxel_downsample(PointCloud(points, normals), 0.01)
    assert np.allclose(down.normals[0], [np.sqrt(0.5), np.sqrt(0.5), 0.0])
    assert np.allclose(down.normals[1], [0.0, 0.0, 1.0])


def test_voxel_downsample_edge_cases():
    empty = PointCloud(np.zeros((0, 3)))
    assert len(voxel_downsample(empty, 0.01)) == 0
    with pytest.raises(RegistrationError):
        voxel_downsample(PointCloud(np.zeros((1, 3))), 0.0)


def test_match_features_nearest_and_mutual():
    source = np.array([[0.0], [1.0], [2.0]])
    target = np.array([[0.0], [10.0]])
    assert match_features(source, target).tolist() == [[0, 0], [1, 0], [2, 0]]
    assert match_features(source, target, mutual=True).tolist() == [[0, 0]]
    assert match_features(source, source).tolist() == identity_pairs(3).tolist()
    with pytest.raises(RegistrationError):
        match_features(np.zeros((0, 33)), target)


# ============================================================================
# RANSAC
# ============================================================================

def test_ransac_identity_has_full_fitness():
    points = np.random.default_rng(0).uniform(size=(200, 3))
    cloud = PointCloud(points)
    result = ransac_global(cloud, cloud, identity_pairs(200), RegistrationParams(distance_threshold=0.01))
    assert not result.flagged
    assert np.allclose(result.transform.matrix, np.eye(4), atol=1e-9)
    assert result.fitness == 1.0 and result.inlier_rmse == pytest.approx(0.0, abs=1e-9)


def test_ransac_recovers_transform_with_outliers():
    rng = np.random.default_rng(1)
    points = rng.uniform(size=(200, 3))
    t = RigidTransform(Rotation.random(random_state=5).as_matrix(), [0.2, -0.1, 0.3])
    source, target = PointCloud(points), PointCloud(t.transform_points(points))
    pairs = identity_pairs(200)
    pairs[::2, 1] = rng.integers(0, 200, size=100)

    result = ransac_global(source, target, pairs, RegistrationParams(distance_threshold=0.01))
    assert not result.flagged
    assert np.allclose(result.transform.matrix, t.matrix, atol=1e-6)
    assert result.correspondence_count >= 100


def test_ransac_is_deterministic():
    rng = np.random.default_rng(2)
    points = rng.uniform(size=(150, 3))
    source = PointCloud(points)
    target = PointCloud(points + rng.normal(scale=0.002, size=points.shape))
    pairs = identity_pairs(150)
    pairs[::3, 1] = rng.integers(0, 150, size=50)
    params = RegistrationParams(distance_threshold=0.01, seed=4)
    a = ransac_global(source, target, pairs, params)
    b = ransac_global(source, target, pairs, params)
    assert np.array_equal(a.transform.matrix, b.transform.matrix)
    assert a.iterations == b.iterations


def test_ransac_needs_enough_correspondences():
    cloud = PointCloud(np.eye(3))
    with pytest.raises(RegistrationError, match="insufficient correspondences"):
        ransac_global(cloud, cloud, identity_pairs(2), RegistrationParams())


def test_ransac_all_hypotheses_pruned():
    cloud = PointCloud(np.zeros((10, 3)))
    result = ransac_global(cloud, cloud, identity_pairs(10), RegistrationParams(ransac_max_iterations=2000))
    assert result.flagged
    assert np.array_equal(result.transform.matrix, np.eye(4))
    assert result.iterations == 2000


def exact_pair(n: int = 100):
    points = np.random.default_rng(6).uniform(size=(n, 3))
    t = RigidTransform(Rotation.from_euler("z", 25, degrees=True).as_matrix(), [0.1, 0.0, 0.2])
    return PointCloud(points), PointCloud(t.transform_points(points)), t


@pytest.mark.parametrize("floor, expected", [(0, 1024), (5000, 5120), (10_000, 2000)])
def test_ransac_runs_at_least_the_iteration_floor(floor, expected):
    source, target, t = exact_pair()
    params = RegistrationParams(distance_threshold=0.01, ransac_min_iterations=floor,
                                ransac_max_iterations=2000 if floor == 10_000 else 100_000)
    result = ransac_global(source, target, identity_pairs(100), params)
    # every pair is an inlier, so confidence alone stops after the first batch
    assert result.iterations == expected
    assert np.allclose(result.transform.matrix, t.matrix, atol=1e-6)


def test_ransac_prefers_the_candidate_covering_the_target():
    points = np.random.default_rng(8).uniform(size=(200, 3))
    true = RigidTransform(Rotation.from_euler("z", 40, degrees=True).as_matrix(), [0.1, 0.2, -0.1])
    decoy = RigidTransform(Rotation.from_euler("x", 150, degrees=True).as_matrix(), [2.0, 0.0, 0.0])
    source = PointCloud(points)
    target = PointCloud(np.vstack([true.transform_points(points), decoy.transform_points(points[60:160])]))
    # 60 pairs agree with the true motion, 100 with the decoy
    pairs = np.concatenate([identity_pairs(60), np.stack([np.arange(60, 160), np.arange(200, 300)], axis=1)])

    result = ransac_global(source, target, pairs, RegistrationParams(distance_threshold=0.01))
    assert np.allclose(result.transform.matrix, true.matrix, atol=1e-6)
    assert result.correspondence_count == 60
    assert result.fitness == pytest.approx(200 / 300)

    single = ransac_global(source, target, pairs, RegistrationParams(distance_threshold=0.01, ransac_candidates=1))
    assert np.allclose(single.transform.matrix, decoy.matrix, atol=1e-6)
    assert single.correspondence_count == 100


# ============================================================================
# ICP and alignment quality
# ============================================================================

def test_icp_identical_clouds():
    cloud = box_sample()
    result = icp_point_to_plane(cloud, cloud, RigidTransform.identity(), RegistrationParams())
    assert not result.flagged
    assert result.inlier_rmse == 0.0
    assert result.fitness == 1.0
    assert np.allclose(result.transform.matrix, np.eye(4), atol=1e-12)


def test_icp_recovers_small_offset():
    target = box_sample()
    offset = np.array([0.0036, -0.002, 0.001])
    source = PointCloud(target.points - offset)
    result = icp_point_to_plane(source, target, RigidTransform.identity(), RegistrationParams())
    assert np.abs(result.transform.translation - offset).max() < 1e-4
    assert result.transform.rotation_angle_to(RigidTransform.identity()) < np.radians(0.05)
    trace = np.array(result.objective_trace)
    assert len(trace) >= 2
    assert np.all(np.diff(trace) <= 0.0)
    assert trace[-1] < trace[0]


def test_icp_without_correspondences_is_flagged():
    target = box_sample()
    source = PointCloud(target.points + 10.0)
    result = icp_point_to_plane(source, target, RigidTransform.identity(), RegistrationParams())
    assert result.flagged
    assert result.transform.matrix.tolist() == np.eye(4).tolist()


def test_icp_requires_target_normals():
    cloud = box_sample()
    with pytest.raises(RegistrationError):
        icp_point_to_plane(cloud, cloud.without_normals(), RigidTransform.identity(), RegistrationParams())


def test_evaluate_alignment():
    cloud = box_sample(500)
    assert evaluate_alignment(cloud, cloud, RigidTransform.identity(), 0.01) == (1.0, 0.0)
    far = RigidTransform.from_translation([5.0, 0.0, 0.0])
    assert evaluate_alignment(cloud, cloud, far, 0.01) == (0.0, 0.0)

    shifted = PointCloud(cloud.points + np.array([0.002, 0.0, 0.0]))
    world = RigidTransform(Rotation.random(random_state=8).as_matrix(), [1.0, 2.0, 3.0])
    before = evaluate_alignment(shifted, cloud, RigidTransform.identity(), 0.01)
    after = evaluate_alignment(apply(world, shifted), apply(world, cloud), RigidTransform.identity(), 0.01)
    assert after[0] == before[0]
    assert after[1] == pytest.approx(before[1], rel=1e-9)


# ============================================================================
# Full registration
# ============================================================================

# ASSEMBLY_POSE_TRIALS=100 runs the full recovery study
RIGID_TRIALS = int(os.environ.get("ASSEMBLY_POSE_TRIALS", "4"))


def test_register_recovers_rigid_motion():
    source = sample_mesh_surface(box_and_cylinder(), 5000, seed=3).without_normals()
    params = RegistrationParams(distance_threshold=0.01, voxel_size=0.005)

    successes = 0
    for trial in range(RIGID_TRIALS):
        rotation = Rotation.random(random_state=100 + trial).as_matrix()
        t = RigidTransform(rotation, [0.004, -0.003, 0.002])
        result = register(source, apply(t, source), params)
        angle = result.transform.rotation_angle_to(t)
        shift = np.abs(result.transform.translation - t.translation).max()
        if not result.flagged and angle < np.radians(0.1) and shift < 1e-5:
            successes += 1
            assert result.fitness == pytest.approx(1.0)
            assert result.downsampled_fitness is not None
    assert successes >= min(RIGID_TRIALS - 1, math.ceil(0.95 * RIGID_TRIALS))


def flagged_stage(transform: RigidTransform):
    def stage(*args, **kwargs):
        return RegistrationResult(transform, 0.7, 0.001, 10, flagged=True)
    return stage


def test_register_reports_zero_fitness_when_ransac_is_flagged(monkeypatch):
    cloud = box_sample()
    nudge = RigidTransform.from_translation([0.001, 0.0, 0.0])
    monkeypatch.setattr(registration, "ransac_global", flagged_stage(nudge))
    result = register(cloud, cloud, RegistrationParams(distance_threshold=0.01, voxel_size=0.005))
    assert result.flagged
    assert (result.fitness, result.inlier_rmse) == (0.0, 0.0)
    assert result.downsampled_fitness == 0.0
    assert np.array_equal(result.transform.matrix, nudge.matrix)


def test_register_reports_zero_fitness_when_icp_is_flagged(monkeypatch):
    cloud = box_sample()
    coarse = RigidTransform.from_translation([0.0, 0.002, 0.0])

    def ransac(*args, **kwargs):
        return RegistrationResult(coarse, 0.9, 0.001, 100)

    monkeypatch.setattr(registration, "ransac_global", ransac)
    monkeypatch.setattr(registration, "icp_point_to_plane", flagged_stage(RigidTransform.identity()))
    result = register(cloud, cloud, RegistrationParams(distance_threshold=0.01, voxel_size=0.005))
    assert result.flagged
    assert (result.fitness, result.inlier_rmse) == (0.0, 0.0)
    assert np.array_equal(result.transform.matrix, coarse.matrix)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
