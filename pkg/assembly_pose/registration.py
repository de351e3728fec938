"""Global RANSAC registration on FPFH matches, point-to-plane ICP refinement,
and alignment quality evaluation (fitness and inlier RMSE).

RANSAC draws its minimal samples in fixed-size batches from one generator
seeded with ``params.seed``; batch b always holds iterations
[b * RANSAC_BATCH, (b + 1) * RANSAC_BATCH), so the result depends only on the
seed and the parameters. Ties between hypotheses go to the earliest iteration.
The confidence stop is checked between batches once
``ransac_min_iterations`` have run. The ``ransac_candidates`` best pose-distinct
hypotheses are refit on their inliers and the one whose transformed source
covers most target points wins.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.transform import Rotation

from assembly_pose import spatial
from assembly_pose.features import FpfhDescriptor, compute_fpfh, estimate_normals
from assembly_pose.geometry import PointCloud, RigidTransform, compose
from assembly_pose.schemas import RegistrationParams

logger = logging.getLogger(__name__)

RANSAC_BATCH = 1024
SCORE_CHUNK = 64


class RegistrationError(ValueError):
    """Raised when registration input is unusable."""


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    """Outcome of a registration stage.

    ``transform`` maps the source cloud into the target frame. ``flagged`` marks
    a failed stage whose transform should not be trusted. ``objective_trace``
    holds the point-to-plane objective after every accepted ICP iteration.
    """
    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    correspondence_count: int
    flagged: bool = False
    objective_trace: Tuple[float, ...] = ()
    downsampled_fitness: Optional[float] = None
    downsampled_rmse: Optional[float] = None
    iterations: int = 0


@dataclass(frozen=True, eq=False)
class PreparedCloud:
    """A downsampled cloud with normals and FPFH descriptors."""
    cloud: PointCloud
    features: FpfhDescriptor = field(repr=False)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of every occupied voxel with their centroid.

    Normals of a voxel are averaged and renormalized. Output order follows the
    lexicographic order of voxel coordinates.
    """
    if not voxel > 0:
        raise RegistrationError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    points = np.zeros((len(counts), 3))
    np.add.at(points, inverse, cloud.points)
    points /= counts[:, None]

    normals = None
    if cloud.normals is not None:
        summed = np.zeros((len(counts), 3))
        np.add.at(summed, inverse, cloud.normals)
        norm = np.linalg.norm(summed, axis=1, keepdims=True)
        cancelled = norm[:, 0] < 1e-12
        normals = summed / np.where(norm < 1e-12, 1.0, norm)
        normals[cancelled] = (0.0, 0.0, 1.0)
    return PointCloud(points, normals)


def match_features(source_desc: FpfhDescriptor, target_desc: FpfhDescriptor,
                   mutual: bool = False) -> NDArray:
    """Pair every source descriptor with its nearest target descriptor.

    Returns an (M, 2) int array of (source_index, target_index). With
    ``mutual`` only pairs that are nearest in both directions are kept.
    """
    source_desc = np.asarray(source_desc, dtype=np.float64)
    target_desc = np.asarray(target_desc, dtype=np.float64)
    if len(source_desc) == 0 or len(target_desc) == 0:
        raise RegistrationError("feature matching needs non-empty descriptor lists")
    _, target_index = spatial.build(target_desc).nearest(source_desc)
    pairs = np.stack([np.arange(len(source_desc)), target_index], axis=1)
    if mutual:
        _, back = spatial.build(source_desc).nearest(target_desc)
        pairs = pairs[back[target_index] == pairs[:, 0]]
    return pairs.astype(np.int64)


def _kabsch(source: NDArray, target: NDArray) -> Tuple[NDArray, NDArray]:
    """Batched least-squares rigid fit; inputs (..., K, 3), returns (R, t)."""
    source_mean = source.mean(axis=-2, keepdims=True)
    target_mean = target.mean(axis=-2, keepdims=True)
    covariance = np.swapaxes(source - source_mean, -1, -2) @ (target - target_mean)
    u, _, vt = np.linalg.svd(covariance)
    d = np.sign(np.linalg.det(np.swapaxes(vt, -1, -2) @ np.swapaxes(u, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    correction = np.ones(u.shape[:-2] + (3,))
    correction[..., 2] = d
    rotation = np.swapaxes(vt, -1, -2) @ (correction[..., :, None] * np.swapaxes(u, -1, -2))
    translation = target_mean[..., 0, :] - np.einsum("...ij,...j->...i", rotation, source_mean[..., 0, :])
    return rotation, translation


def fit_rigid(source: NDArray, target: NDArray) -> RigidTransform:
    """Closed-form rigid transform mapping ``source`` rows onto ``target`` rows."""
    rotation, translation = _kabsch(np.asarray(source, dtype=np.float64), np.asarray(target, dtype=np.float64))
    return RigidTransform(rotation, translation)


def evaluate_alignment(source: PointCloud, target: PointCloud, t: RigidTransform,
                       threshold: float) -> Tuple[float, float]:
    """Fitness and inlier RMSE of ``source`` moved by ``t`` against ``target``.

    An inlier is a transformed source point whose nearest target point lies
    within ``threshold``. Fitness is the inlier count over the target point
    count, capped at 1; RMSE is over inlier distances. No inliers gives (0, 0).
    """
    if not threshold > 0:
        raise RegistrationError("threshold must be positive")
    if len(source) == 0 or len(target) == 0:
        raise RegistrationError("cannot evaluate alignment of empty clouds")
    dist, _ = spatial.build(target.points).nearest(t.transform_points(source.points))
    inliers = dist <= threshold
    count = int(inliers.sum())
    if count == 0:
        return 0.0, 0.0
    fitness = min(1.0, count / len(target))
    return fitness, float(np.sqrt(np.mean(dist[inliers] ** 2)))


def _edge_consistent(source_samples: NDArray, target_samples: NDArray, factor: float) -> NDArray:
    """Edge-length similarity check for every pair within each sample."""
    k = source_samples.shape[1]
    first, second = np.triu_indices(k, 1)
    edge_s = np.linalg.norm(source_samples[:, first] - source_samples[:, second], axis=-1)
    edge_t = np.linalg.norm(target_samples[:, first] - target_samples[:, second], axis=-1)
    return np.all((edge_s > factor * edge_t) & (edge_t > factor * edge_s), axis=1)


def _inlier_counts(rotation: NDArray, translation: NDArray, src: NDArray, dst: NDArray,
                   threshold: float) -> NDArray:
    moved = np.einsum("bij,nj->bni", rotation, src) + translation[:, None, :]
    return np.sum(np.linalg.norm(moved - dst, axis=-1) <= threshold, axis=1)


def _required_iterations(inlier_ratio: float, sample_size: int, confidence: float) -> float:
    if inlier_ratio <= 0.0:
        return np.inf
    p_good = inlier_ratio ** sample_size
    if p_good >= 1.0:
        return 0.0
    return np.log(1.0 - confidence) / np.log(1.0 - p_good)


CANDIDATE_ANGLE = np.radians(5.0)


@dataclass(frozen=True, eq=False)
class _Candidate:
    count: int
    iteration: int
    rotation: NDArray
    translation: NDArray

    def near(self, other: "_Candidate", threshold: float) -> bool:
        cos = (np.trace(self.rotation.T @ other.rotation) - 1.0) / 2.0
        return (np.arccos(np.clip(cos, -1.0, 1.0)) < CANDIDATE_ANGLE
                and np.linalg.norm(self.translation - other.translation) < threshold)


def _merge_candidates(candidates: List[_Candidate], counts: NDArray, iterations: NDArray,
                      rotation: NDArray, translation: NDArray, limit: int, threshold: float) -> None:
    """Keep the ``limit`` best pose-distinct hypotheses, most inliers first, earliest on ties."""
    for i in np.lexsort((iterations, -counts)):
        if len(candidates) == limit and counts[i] <= candidates[-1].count:
            break
        entry = _Candidate(int(counts[i]), int(iterations[i]), rotation[i], translation[i])
        for j, kept in enumerate(candidates):
            if kept.near(entry, threshold):
                if entry.count > kept.count:
                    candidates[j] = entry
                break
        else:
            candidates.append(entry)
        candidates.sort(key=lambda c: (-c.count, c.iteration))
        del candidates[limit:]


def ransac_global(source: PointCloud, target: PointCloud, correspondences: NDArray,
                  params: RegistrationParams) -> RegistrationResult:
    """Coarse alignment from putative correspondences (source_index, target_index).

    Each hypothesis samples ``ransac_sample_size`` correspondences, is pruned by
    the edge-length check and by the distance check on its own samples, and is
    scored by its inlier count over all correspondences.
    """
    pairs = np.asarray(correspondences, dtype=np.int64).reshape(-1, 2)
    k = params.ransac_sample_size
    if len(pairs) < k:
        raise RegistrationError("insufficient correspondences")

    src = source.points[pairs[:, 0]]
    dst = target.points[pairs[:, 1]]
    threshold = params.distance_threshold
    rng = np.random.default_rng(params.seed)
    floor = min(params.ransac_min_iterations, params.ransac_max_iterations)

    candidates: List[_Candidate] = []
    done = 0
    while done < params.ransac_max_iterations:
        batch = min(RANSAC_BATCH, params.ransac_max_iterations - done)
        samples = rng.integers(0, len(pairs), size=(batch, k))
        sample_src, sample_dst = src[samples], dst[samples]

        survivors = np.flatnonzero(_edge_consistent(sample_src, sample_dst, params.edge_length_factor))
        if len(survivors):
            rotation, translation = _kabsch(sample_src[survivors], sample_dst[survivors])
            moved = np.einsum("bij,bkj->bki", rotation, sample_src[survivors]) + translation[:, None, :]
            close = np.all(np.linalg.norm(moved - sample_dst[survivors], axis=-1) <= threshold, axis=1)
            survivors, rotation, translation = survivors[close], rotation[close], translation[close]
        if len(survivors):
            counts = np.concatenate([
                _inlier_counts(rotation[start:start + SCORE_CHUNK], translation[start:start + SCORE_CHUNK],
                               src, dst, threshold)
                for start in range(0, len(survivors), SCORE_CHUNK)
            ])
            _merge_candidates(candidates, counts, done + survivors, rotation, translation,
                              params.ransac_candidates, threshold)
        done += batch
        best_count = candidates[0].count if candidates else 0
        if done >= floor and done >= _required_iterations(best_count / len(pairs), k, params.ransac_confidence):
            logger.debug("ransac: confidence reached after %d iterations", done)
            break

    if not candidates:
        logger.debug("ransac: every hypothesis pruned in %d iterations", done)
        return RegistrationResult(RigidTransform.identity(), 0.0, 0.0, 0, flagged=True, iterations=done)

    # refit every candidate on its inliers, keep the one covering most target points
    tree = spatial.build(target.points)
    best = None
    for candidate in candidates:
        moved = src @ candidate.rotation.T + candidate.translation
        inliers = np.linalg.norm(moved - dst, axis=1) <= threshold
        transform = fit_rigid(src[inliers], dst[inliers]) if inliers.sum() >= 3 else \
            RigidTransform(candidate.rotation, candidate.translation)
        dist, _ = tree.nearest(transform.transform_points(source.points))
        close = dist <= threshold
        overlap = int(close.sum())
        rmse = float(np.sqrt(np.mean(dist[close] ** 2))) if overlap else np.inf
        if best is None or overlap > best[0] or (overlap == best[0] and rmse < best[1]):
            best = (overlap, rmse, int(inliers.sum()), candidate, transform)

    _, _, inlier_count, chosen, transform = best
    fitness, rmse = evaluate_alignment(source, target, transform, threshold)
    logger.debug("ransac: chose iteration %d (%d inliers) of %d candidates", chosen.iteration,
                 chosen.count, len(candidates))
    return RegistrationResult(transform, fitness, rmse, inlier_count, iterations=done)


def _point_to_plane(moved: NDArray, tree: spatial.KdTree, target: PointCloud,
                    threshold: float) -> Tuple[float, NDArray, NDArray, NDArray]:
    """Objective sum((p - Tq) . n_p)^2 over source points with a target neighbor within threshold."""
    dist, index = tree.nearest(moved)
    mask = dist <= threshold
    residual = np.einsum("ij,ij->i", moved[mask] - target.points[index[mask]], target.normals[index[mask]])
    return float(np.sum(residual ** 2)), mask, index, residual


def _relative_change(new: float, old: float) -> float:
    if old == 0.0:
        return 0.0 if new == 0.0 else np.inf
    return abs(new - old) / abs(old)


def icp_point_to_plane(source: PointCloud, target: PointCloud, init: RigidTransform,
                       params: RegistrationParams) -> RegistrationResult:
    """Refine ``init`` by point-to-plane ICP; the target must carry normals.

    Each iteration solves the 6x6 small-angle normal equations for (omega, t)
    and backtracks on the step until the objective does not increase, so the
    recorded objective trace is non-increasing.
    """
    if target.normals is None:
        raise RegistrationError("point-to-plane ICP needs target normals")
    if len(source) == 0 or len(target) == 0:
        raise RegistrationError("cannot refine empty clouds")
    threshold = params.distance_threshold
    tree = spatial.build(target.points)

    transform = init
    objective, mask, index, residual = _point_to_plane(transform.transform_points(source.points),
                                                       tree, target, threshold)
    if not mask.any():
        logger.debug("icp: no correspondences within %.4f m at init", threshold)
        return RegistrationResult(init, 0.0, 0.0, 0, flagged=True)

    fitness, rmse = evaluate_alignment(source, target, transform, threshold)
    trace = [objective]
    iteration = 0
    for iteration in range(1, params.icp_max_iterations + 1):
        moved = transform.transform_points(source.points)
        p = moved[mask]
        n = target.normals[index[mask]]
        jacobian = np.hstack([np.cross(p, n), n])
        step, *_ = np.linalg.lstsq(jacobian.T @ jacobian, -(jacobian.T @ residual), rcond=None)

        accepted = None
        scale = 1.0
        for _ in range(8):
            update = RigidTransform(Rotation.from_rotvec(scale * step[:3]).as_matrix(), scale * step[3:])
            candidate = compose(update, transform)
            result = _point_to_plane(candidate.transform_points(source.points), tree, target, threshold)
            if result[0] <= objective:
                accepted = candidate, result
                break
            scale *= 0.5
        if accepted is None:
            logger.debug("icp: no decreasing step at iteration %d", iteration)
            break

        transform, (objective, mask, index, residual) = accepted
        trace.append(objective)
        new_fitness, new_rmse = evaluate_alignment(source, target, transform, threshold)
        converged = (_relative_change(new_fitness, fitness) < params.icp_relative_fitness_eps
                     and _relative_change(new_rmse, rmse) < params.icp_relative_rmse_eps)
        fitness, rmse = new_fitness, new_rmse
        if converged or not mask.any():
            break

    logger.debug("icp: %d iterations, fitness %.6f, rmse %.6g", iteration, fitness, rmse)
    return RegistrationResult(transform, fitness, rmse, int(mask.sum()),
                              objective_trace=tuple(trace), iterations=iteration)


def prepare_cloud(cloud: PointCloud, params: RegistrationParams,
                  viewpoint: Sequence[float] = (0.0, 0.0, 0.0)) -> PreparedCloud:
    """Downsample, estimate normals and compute FPFH features."""
    voxel = params.effective_voxel_size
    down = voxel_downsample(cloud.without_normals(), voxel)
    down = estimate_normals(down, params.normal_radius_factor * voxel, params.normal_max_nn, viewpoint)
    return PreparedCloud(down, compute_fpfh(down, params.fpfh_radius_factor * voxel, params.fpfh_max_nn))


def _failed(result: RegistrationResult) -> RegistrationResult:
    """A flagged result reports zero fitness and RMSE; its transform is kept."""
    return replace(result, fitness=0.0, inlier_rmse=0.0, flagged=True,
                   downsampled_fitness=0.0, downsampled_rmse=0.0)


def register(source: PointCloud, target: PointCloud, params: RegistrationParams,
             viewpoint: Sequence[float] = (0.0, 0.0, 0.0)) -> RegistrationResult:
    """Full registration of ``source`` onto ``target``: FPFH + RANSAC, then ICP.

    Fitness and RMSE of the result are measured on the full clouds; the
    downsampled figures are reported alongside.
    """
    source_prepared = prepare_cloud(source, params, viewpoint)
    target_prepared = prepare_cloud(target, params, viewpoint)
    pairs = match_features(source_prepared.features, target_prepared.features, mutual=params.mutual_filter)
    coarse = ransac_global(source_prepared.cloud, target_prepared.cloud, pairs, params)
    if coarse.flagged:
        return _failed(coarse)

    if params.icp_full_resolution:
        voxel = params.effective_voxel_size
        icp_source = source
        icp_target = estimate_normals(target.without_normals(), params.normal_radius_factor * voxel,
                                      params.normal_max_nn, viewpoint)
    else:
        icp_source, icp_target = source_prepared.cloud, target_prepared.cloud
    fine = icp_point_to_plane(icp_source, icp_target, coarse.transform, params)
    if fine.flagged:
        return _failed(replace(fine, transform=coarse.transform))

    fitness, rmse = evaluate_alignment(source, target, fine.transform, params.distance_threshold)
    down_fitness, down_rmse = evaluate_alignment(source_prepared.cloud, target_prepared.cloud,
                                                 fine.transform, params.distance_threshold)
    return replace(fine, fitness=fitness, inlier_rmse=rmse,
                   downsampled_fitness=down_fitness, downsampled_rmse=down_rmse)
