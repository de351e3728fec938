"""Core geometric types and rigid transform algebra.

Everything else in the package is built on the four types defined here:
- RigidTransform: an SE(3) element stored as a 3x3 rotation and a translation
- PointCloud: positions with optional unit normals
- TriangleMesh: indexed triangle set loaded from STL/OBJ or built from primitives
- AxisAlignedBox: min/max corners, used for bounding-box overlays

All lengths are meters. Instances are immutable after construction (arrays are
made read-only), so they can be shared freely between worker threads.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import trimesh
from numpy.typing import NDArray
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

# Tolerance for accepting a rotation matrix supplied from outside.
ORTHONORMAL_TOLERANCE = 1e-6
NORMAL_TOLERANCE = 1e-6
# Triangles below this area (m^2) are dropped at load time.
DEGENERATE_AREA = 1e-12


class GeometryError(ValueError):
    """Raised for invalid geometric input (empty mesh, empty cloud, bad shapes)."""


def _frozen(array: NDArray, dtype=np.float64) -> NDArray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """A rotation followed by a translation: x -> R x + t."""

    rotation: NDArray = field(default_factory=lambda: np.eye(3))
    translation: NDArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = _frozen(self.rotation)
        translation = _frozen(self.translation).reshape(3)
        if rotation.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {rotation.shape}")
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise GeometryError("transform contains non-finite values")
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > ORTHONORMAL_TOLERANCE:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise GeometryError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, translation: Sequence[float]) -> "RigidTransform":
        return cls(np.eye(3), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, matrix: Union[NDArray, Sequence[float]]) -> "RigidTransform":
        """Build from a 4x4 homogeneous matrix or its 16 row-major entries."""
        m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise GeometryError("last row of a homogeneous transform must be [0, 0, 0, 1]")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, quaternion_wxyz: Sequence[float],
                        translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        """Build from a (w, x, y, z) quaternion; the quaternion is normalized first."""
        w, x, y, z = (float(v) for v in quaternion_wxyz)
        rotation = Rotation.from_quat([x, y, z, w]).as_matrix()
        return cls(rotation, np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float],
                    translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix(),
                   np.asarray(translation, dtype=np.float64))

    @property
    def matrix(self) -> NDArray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def as_quaternion(self) -> NDArray:
        """Return the rotation as a (w, x, y, z) quaternion."""
        x, y, z, w = Rotation.from_matrix(self.rotation).as_quat()
        return np.array([w, x, y, z])

    def transform_points(self, points: NDArray) -> NDArray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.rotation.T + self.translation

    def rotation_angle_to(self, other: "RigidTransform") -> float:
        """Angle in radians of the relative rotation between two transforms."""
        relative = self.rotation.T @ other.rotation
        cos = np.clip((np.trace(relative) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.arccos(cos))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Homogeneous product a @ b: apply b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rotation_t = t.rotation.T
    return RigidTransform(rotation_t, -(rotation_t @ t.translation))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points (N, 3) in meters with optional unit normals (N, 3).

    ``degenerate`` optionally marks points whose normal is a placeholder
    because their neighborhood was too small to fit a plane.
    """

    points: NDArray
    normals: Optional[NDArray] = None
    degenerate: Optional[NDArray] = None

    def __post_init__(self):
        points = _frozen(self.points).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise GeometryError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", points)
        if self.normals is not None:
            normals = _frozen(self.normals).reshape(-1, 3)
            if normals.shape != points.shape:
                raise GeometryError(
                    f"normal count {len(normals)} does not match point count {len(points)}"
                )
            if len(normals) and np.abs(np.linalg.norm(normals, axis=1) - 1.0).max() > NORMAL_TOLERANCE:
                raise GeometryError("normals must have unit length")
            object.__setattr__(self, "normals", normals)
        if self.degenerate is not None:
            flags = _frozen(self.degenerate, dtype=bool).reshape(-1)
            if flags.shape[0] != points.shape[0]:
                raise GeometryError("degenerate mask length does not match point count")
            object.__setattr__(self, "degenerate", flags)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def select(self, index: NDArray) -> "PointCloud":
        normals = None if self.normals is None else self.normals[index]
        return PointCloud(self.points[index], normals)

    def without_normals(self) -> "PointCloud":
        return PointCloud(self.points)


@dataclass(frozen=True, eq=False)
class AxisAlignedBox:
    min: NDArray
    max: NDArray

    def __post_init__(self):
        lo = _frozen(self.min).reshape(3)
        hi = _frozen(self.max).reshape(3)
        if np.any(lo > hi):
            raise GeometryError("box min must not exceed max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def around(cls, points: NDArray) -> "AxisAlignedBox":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise GeometryError("cannot bound an empty point set")
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def extent(self) -> NDArray:
        return self.max - self.min

    def corners(self) -> NDArray:
        """The 8 corners; index bits (x, y, z) select min (0) or max (1)."""
        bits = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)], dtype=bool)
        return np.where(bits, self.max, self.min)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle mesh. Use :meth:`from_arrays` to drop degenerate faces."""

    vertices: NDArray
    triangles: NDArray

    def __post_init__(self):
        vertices = _frozen(self.vertices).reshape(-1, 3)
        triangles = _frozen(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise GeometryError("triangle index out of range")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)

    @classmethod
    def from_arrays(cls, vertices: NDArray, triangles: NDArray, name: str = "mesh") -> "TriangleMesh":
        raw = cls(vertices, triangles)
        keep = raw.face_areas() >= DEGENERATE_AREA
        dropped = int((~keep).sum())
        if dropped:
            logger.warning("%s: dropped %d degenerate triangles", name, dropped)
        return cls(raw.vertices, raw.triangles[keep])

    @classmethod
    def from_trimesh(cls, mesh: trimesh.Trimesh, scale: float = 1.0, name: str = "mesh") -> "TriangleMesh":
        return cls.from_arrays(np.asarray(mesh.vertices) * scale, np.asarray(mesh.faces), name=name)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def corners(self) -> NDArray:
        """Triangle corner coordinates, shape (F, 3, 3)."""
        return self.vertices[self.triangles]

    def face_areas(self) -> NDArray:
        tri = self.corners()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def face_normals(self) -> NDArray:
        tri = self.corners()
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return cross / np.linalg.norm(cross, axis=1, keepdims=True)

    def vertex_centroid(self) -> NDArray:
        if len(self.vertices) == 0:
            raise GeometryError("empty mesh")
        return self.vertices.mean(axis=0)

    def bounds(self) -> AxisAlignedBox:
        return AxisAlignedBox.around(self.vertices)

    def transformed(self, t: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(t.transform_points(self.vertices), self.triangles)


def merge_meshes(meshes: Sequence[TriangleMesh]) -> TriangleMesh:
    """Concatenate meshes into one triangle soup (no welding)."""
    vertices, triangles, offset = [], [], 0
    for mesh in meshes:
        vertices.append(mesh.vertices)
        triangles.append(mesh.triangles + offset)
        offset += len(mesh.vertices)
    if not vertices:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(np.vstack(vertices), np.vstack(triangles))


def load_mesh(path: Union[str, Path], scale: float = 1.0) -> TriangleMesh:
    """Load a triangulated STL or OBJ file and convert it to meters with ``scale``.

    Args:
        path: Mesh file
        scale: Multiplier from file units to meters (0.001 for millimeter CAD)

    Raises:
        GeometryError: If the file holds no triangles
    """
    path = Path(path)
    loaded = trimesh.load(str(path), force="mesh", process=False)
    mesh = TriangleMesh.from_trimesh(loaded, scale=scale, name=path.name)
    if mesh.is_empty:
        raise GeometryError(f"empty mesh: {path}")
    return mesh


def apply(t: RigidTransform, cloud: PointCloud) -> PointCloud:
    """Transform points; normals are rotated only."""
    normals = None if cloud.normals is None else cloud.normals @ t.rotation.T
    return PointCloud(t.transform_points(cloud.points), normals, cloud.degenerate)


def sample_mesh_surface(mesh: TriangleMesh, n: int, seed: int) -> PointCloud:
    """Draw ``n`` area-uniform surface samples carrying their face normals.

    A triangle is picked with probability proportional to its area, then a point
    is drawn uniformly inside it with the square-root barycentric mapping.
    """
    if mesh.is_empty:
        raise GeometryError("empty mesh")
    if n < 1:
        raise GeometryError("sample count must be at least 1")
    rng = np.random.default_rng(seed)
    area_cum = np.cumsum(mesh.face_areas())
    face_index = np.searchsorted(area_cum, rng.random(n) * area_cum[-1], side="right")
    face_index = np.minimum(face_index, len(area_cum) - 1)

    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    tri = mesh.corners()[face_index]
    points = (1.0 - r1) * tri[:, 0] + r1 * (1.0 - r2) * tri[:, 1] + r1 * r2 * tri[:, 2]
    return PointCloud(points, mesh.face_normals()[face_index])


def centroid(cloud: PointCloud) -> NDArray:
    if len(cloud) == 0:
        raise GeometryError("empty cloud")
    return cloud.points.mean(axis=0)


def mesh_diameter(mesh: TriangleMesh) -> float:
    """Largest distance between two vertices (searched over the convex hull)."""
    vertices = np.unique(mesh.vertices, axis=0)
    if len(mesh.vertices) < 2:
        raise GeometryError("mesh diameter needs at least 2 vertices")
    if len(vertices) < 2:
        return 0.0
    if len(vertices) > 4:
        try:
            vertices = vertices[ConvexHull(vertices).vertices]
        except QhullError:
            # flat or collinear vertex sets: fall back to all vertices
            pass
    return float(pdist(vertices).max())
