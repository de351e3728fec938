"""Nearest-neighbor and radius queries over 3-D points and 33-D descriptors.

KdTree wraps scipy's cKDTree built with median splits and 16-vector leaves.
Single-query methods return exact Euclidean distances and break distance ties
by ascending stored index, so results match an exhaustive scan exactly. The
batch methods go straight to cKDTree and are what the hot loops use.
"""

from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

LEAF_SIZE = 16

Neighbor = Tuple[int, float]


class SpatialIndexError(ValueError):
    """Raised for malformed vectors or queries."""


def _as_matrix(vectors: Union[NDArray, Sequence[Sequence[float]]], dimension: Optional[int] = None) -> NDArray:
    if isinstance(vectors, np.ndarray):
        data = np.array(vectors, dtype=np.float64)
        if data.ndim == 1 and data.size == 0:
            data = data.reshape(0, dimension or 3)
    else:
        rows = list(vectors)
        if not rows:
            return np.zeros((0, dimension or 3))
        lengths = {len(row) for row in rows}
        if len(lengths) != 1:
            raise SpatialIndexError(f"dimension mismatch: got vector lengths {sorted(lengths)}")
        data = np.asarray(rows, dtype=np.float64)
    if data.ndim != 2:
        raise SpatialIndexError("expected a list of equal-length vectors")
    if not np.all(np.isfinite(data)):
        raise SpatialIndexError("vectors must be finite")
    return data


class KdTree:
    """Immutable k-d tree; concurrent queries are safe."""

    def __init__(self, data: NDArray):
        self._data = data
        self._data.setflags(write=False)
        self._tree = cKDTree(data, leafsize=LEAF_SIZE, balanced_tree=True) if len(data) else None

    @property
    def size(self) -> int:
        return int(self._data.shape[0])

    @property
    def dimension(self) -> int:
        return int(self._data.shape[1])

    @property
    def data(self) -> NDArray:
        return self._data

    def _check_query(self, query: Sequence[float]) -> NDArray:
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dimension:
            raise SpatialIndexError(
                f"query dimension {q.shape[0]} does not match tree dimension {self.dimension}"
            )
        return q

    def _ranked(self, index: NDArray, q: NDArray) -> Tuple[NDArray, NDArray]:
        index = np.asarray(index, dtype=np.int64)
        dist = np.linalg.norm(self._data[index] - q, axis=1)
        order = np.lexsort((index, dist))
        return index[order], dist[order]

    def knn(self, query: Sequence[float], k: int) -> List[Neighbor]:
        """The ``k`` nearest stored vectors, ascending by distance then index."""
        if k < 1:
            raise SpatialIndexError("k must be at least 1")
        if self._tree is None:
            return []
        q = self._check_query(query)
        k = min(k, self.size)
        dist, _ = self._tree.query(q, k=k)
        kth = float(np.atleast_1d(dist)[-1])
        # everything at the k-th distance is a tie candidate
        candidates = self._tree.query_ball_point(q, kth * (1.0 + 1e-12) + 1e-300)
        index, dist = self._ranked(candidates, q)
        return [(int(i), float(d)) for i, d in zip(index[:k], dist[:k])]

    def radius_search(self, query: Sequence[float], radius: float) -> List[Neighbor]:
        """All stored vectors within ``radius``, ascending by distance then index."""
        if not radius > 0:
            raise SpatialIndexError("radius must be positive")
        if self._tree is None:
            return []
        q = self._check_query(query)
        index, dist = self._ranked(self._tree.query_ball_point(q, radius), q)
        keep = dist <= radius
        return [(int(i), float(d)) for i, d in zip(index[keep], dist[keep])]

    def knn_batch(self, queries: NDArray, k: int = 1) -> Tuple[NDArray, NDArray]:
        """Vectorized k-NN; returns (distances, indices), each (M, k).

        Missing neighbors (tree smaller than k) have distance inf and index ``size``.
        """
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, self.dimension)
        if self._tree is None:
            return (np.full((len(queries), k), np.inf), np.full((len(queries), k), self.size, dtype=np.int64))
        dist, index = self._tree.query(queries, k=k)
        return dist.reshape(len(queries), k), np.asarray(index, dtype=np.int64).reshape(len(queries), k)

    def nearest(self, queries: NDArray) -> Tuple[NDArray, NDArray]:
        """Nearest stored vector for each query; returns (distances, indices), each (M,)."""
        dist, index = self.knn_batch(queries, 1)
        return dist[:, 0], index[:, 0]

    def capped_neighborhoods(self, queries: NDArray, radius: float, max_nn: int) -> Tuple[NDArray, NDArray]:
        """Up to ``max_nn`` nearest stored vectors within ``radius`` of each query.

        Returns (distances, indices) of shape (M, max_nn); unused slots hold
        distance inf and index ``size``.
        """
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, self.dimension)
        if self._tree is None:
            return (np.full((len(queries), max_nn), np.inf),
                    np.full((len(queries), max_nn), self.size, dtype=np.int64))
        dist, index = self._tree.query(queries, k=max_nn, distance_upper_bound=radius)
        dist = dist.reshape(len(queries), max_nn)
        index = np.asarray(index, dtype=np.int64).reshape(len(queries), max_nn)
        return dist, index


def build(vectors: Union[NDArray, Sequence[Sequence[float]]]) -> KdTree:
    """Build a tree over equal-dimension finite vectors (an empty list is allowed)."""
    return KdTree(_as_matrix(vectors))
