"""Normal estimation and FPFH descriptors.

FPFH layout: 33 bins = 11 bins for each of alpha (v . n_t, in [-1, 1]),
phi (n_s . d / |d|, in [-1, 1]) and theta (in [-pi, pi]), computed in the
Darboux frame of every neighbor pair. Each 11-bin block of a point's SPFH sums
to 100; the FPFH adds the distance-weighted mean of the neighbors' SPFHs.
"""

import logging
from typing import Sequence, TypeAlias

import numpy as np
from numpy.typing import NDArray

from assembly_pose import spatial
from assembly_pose.geometry import PointCloud

logger = logging.getLogger(__name__)

FPFH_BINS = 11
FPFH_DIMENSION = 3 * FPFH_BINS

# (N, 33) array, one FpfhDescriptor histogram per row
FpfhDescriptor: TypeAlias = NDArray


class FeatureError(ValueError):
    """Raised when a cloud cannot be described (no points, missing normals)."""


def _row_dot(a: NDArray, b: NDArray) -> NDArray:
    return np.einsum("ij,ij->i", a, b)


def estimate_normals(
    cloud: PointCloud,
    radius: float,
    max_nn: int = 30,
    viewpoint: Sequence[float] = (0.0, 0.0, 0.0),
) -> PointCloud:
    """Fit a plane to each point's neighborhood and orient it toward ``viewpoint``.

    Neighbors are the ``max_nn`` nearest points within ``radius`` (the point
    itself included). Points with fewer than 3 neighbors get normal (0, 0, 1)
    and are marked in the returned cloud's ``degenerate`` mask.
    """
    if len(cloud) == 0:
        raise FeatureError("empty cloud")
    if not radius > 0:
        raise FeatureError("normal radius must be positive")

    points = cloud.points
    dist, index = spatial.build(points).capped_neighborhoods(points, radius, max_nn)
    valid = np.isfinite(dist)
    count = valid.sum(axis=1)
    denom = np.maximum(count, 1).astype(np.float64)

    neighbors = points[np.where(valid, index, 0)]
    weight = valid[..., None]
    mean = (neighbors * weight).sum(axis=1) / denom[:, None]
    centered = (neighbors - mean[:, None, :]) * weight
    covariance = np.einsum("nki,nkj->nij", centered, centered) / denom[:, None, None]

    _, eigenvectors = np.linalg.eigh(covariance)
    normals = eigenvectors[:, :, 0].copy()
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    toward = np.asarray(viewpoint, dtype=np.float64) - points
    normals[_row_dot(normals, toward) < 0] *= -1.0

    degenerate = count < 3
    normals[degenerate] = (0.0, 0.0, 1.0)
    if degenerate.any():
        logger.debug("normal estimation: %d of %d points flagged", int(degenerate.sum()), len(points))
    return PointCloud(points, normals, degenerate)


def _pair_features(p_s: NDArray, n_s: NDArray, p_t: NDArray, n_t: NDArray) -> NDArray:
    """(alpha, phi, theta) for each pair; the endpoint with the smaller angle is the source."""
    delta = p_t - p_s
    delta /= np.linalg.norm(delta, axis=1, keepdims=True)
    angle_s = _row_dot(n_s, delta)
    angle_t = _row_dot(n_t, delta)

    swap = np.abs(angle_s) < np.abs(angle_t)
    u = np.where(swap[:, None], n_t, n_s)
    other = np.where(swap[:, None], n_s, n_t)
    delta = np.where(swap[:, None], -delta, delta)
    phi = np.where(swap, -angle_t, angle_s)

    v = np.cross(delta, u)
    v_norm = np.linalg.norm(v, axis=1)
    flat = v_norm < 1e-12
    v = v / np.where(flat, 1.0, v_norm)[:, None]
    w = np.cross(u, v)

    alpha = _row_dot(v, other)
    theta = np.arctan2(_row_dot(w, other), _row_dot(u, other))
    features = np.stack([alpha, phi, theta], axis=1)
    # normal parallel to the connecting line: no Darboux frame
    features[flat] = 0.0
    return features


def _bin(features: NDArray) -> NDArray:
    lower = np.array([-1.0, -1.0, -np.pi])
    span = np.array([2.0, 2.0, 2.0 * np.pi])
    bins = np.floor(FPFH_BINS * (features - lower) / span).astype(np.int64)
    return np.clip(bins, 0, FPFH_BINS - 1)


def compute_fpfh(cloud: PointCloud, radius: float, max_nn: int = 100) -> FpfhDescriptor:
    """One 33-bin FPFH histogram per point, shape (N, 33)."""
    if cloud.normals is None:
        raise FeatureError("normals required")
    if not radius > 0:
        raise FeatureError("feature radius must be positive")
    n = len(cloud)
    if n == 0:
        return np.zeros((0, FPFH_DIMENSION))

    points, normals = cloud.points, cloud.normals
    # one extra slot because the point itself comes back at distance 0
    dist, index = spatial.build(points).capped_neighborhoods(points, radius, max_nn + 1)
    valid = np.isfinite(dist) & (dist > 0.0)
    count = valid.sum(axis=1)

    rows, slots = np.nonzero(valid)
    cols = index[rows, slots]
    pair_dist = dist[rows, slots]

    spfh = np.zeros((n, FPFH_DIMENSION))
    if len(rows):
        bins = _bin(_pair_features(points[rows], normals[rows], points[cols], normals[cols]))
        increment = 100.0 / count[rows]
        for block in range(3):
            np.add.at(spfh, (rows, block * FPFH_BINS + bins[:, block]), increment)

    neighborhood = np.zeros_like(spfh)
    if len(rows):
        np.add.at(neighborhood, rows, spfh[cols] / pair_dist[:, None])
    return spfh + neighborhood / np.maximum(count, 1)[:, None]
