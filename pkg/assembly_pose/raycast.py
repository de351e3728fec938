"""Pinhole ray casting against posed triangle meshes.

Rays leave the camera origin through pixel centers (pixel (u, v) is centered on
integer coordinates) with direction ((u - cx) / fx, (v - cy) / fy, 1), so the
ray parameter of a hit equals its camera-frame z. Triangles are intersected in
scene order with Moller-Trumbore and a strict closest-hit test; the culled path
only visits the pixels inside each triangle's projected bounding box and yields
the same images bit for bit as the brute-force path.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from assembly_pose.geometry import PointCloud, RigidTransform, TriangleMesh, centroid
from assembly_pose.schemas import CameraIntrinsics

logger = logging.getLogger(__name__)

# Rays closer to a triangle plane than this are treated as parallel.
PARALLEL_EPS = 1e-12
# Hits nearer than this (meters) are ignored.
NEAR_CLIP = 1e-9

SceneObject = Tuple[TriangleMesh, RigidTransform, int]


class RenderError(ValueError):
    """Raised for invalid cameras, mismatched images and invisible sources."""


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole intrinsics plus a camera-to-world pose (x right, y down, z forward)."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    depth_scale: float = 0.1

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise RenderError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise RenderError("principal point must lie inside the image")

    @classmethod
    def from_intrinsics(cls, intrinsics: CameraIntrinsics,
                        pose: Optional[RigidTransform] = None) -> "CameraModel":
        return cls(intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy,
                   intrinsics.width, intrinsics.height,
                   pose if pose is not None else RigidTransform.identity(), intrinsics.depth_scale)

    @classmethod
    def preset(cls, pose: Optional[RigidTransform] = None) -> "CameraModel":
        """640x480 camera with fx = fy = 615 and a centered principal point."""
        return cls.from_intrinsics(CameraIntrinsics(), pose)

    @property
    def K(self) -> NDArray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def with_pose(self, pose: RigidTransform) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose, self.depth_scale)


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Camera-frame z per pixel in meters; 0 means no hit."""
    values: NDArray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise RenderError("depth image must be 2-D")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise RenderError("depth values must be finite and non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class LabelImage:
    """Object id per pixel; 0 is background."""
    values: NDArray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.uint8)
        if values.ndim != 2:
            raise RenderError("label image must be 2-D")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    def ids(self) -> set:
        return {int(i) for i in np.unique(self.values) if i != 0}


def _intersect(dx: NDArray, dy: NDArray, tri: NDArray) -> NDArray:
    """Moller-Trumbore distance along rays (dx, dy, 1) from the origin; inf on a miss.

    Every product is written out per component so that a pixel's result does not
    depend on which other pixels are in the batch.
    """
    v0, v1, v2 = tri
    e1x, e1y, e1z = v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2]
    e2x, e2y, e2z = v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2]
    # p = d x e2
    px = dy * e2z - e2y
    py = e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    parallel = np.abs(det) < PARALLEL_EPS
    inv = 1.0 / np.where(parallel, 1.0, det)
    # s = origin - v0
    sx, sy, sz = -v0[0], -v0[1], -v0[2]
    u = (sx * px + sy * py + sz * pz) * inv
    # q = s x e1
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + qz) * inv
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    hit = ~parallel & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > NEAR_CLIP)
    return np.where(hit, t, np.inf)


def _pixel_window(tri: NDArray, camera: CameraModel) -> Optional[Tuple[int, int, int, int]]:
    """Pixel bounds (u0, u1, v0, v1), inclusive-exclusive, that a triangle can cover."""
    z = tri[:, 2]
    if np.all(z <= NEAR_CLIP):
        return None
    if np.any(z <= NEAR_CLIP):
        # crosses the camera plane: projected bounds are unbounded
        return 0, camera.width, 0, camera.height
    u = camera.fx * tri[:, 0] / z + camera.cx
    v = camera.fy * tri[:, 1] / z + camera.cy
    u0 = max(int(np.floor(u.min())) - 1, 0)
    u1 = min(int(np.ceil(u.max())) + 2, camera.width)
    v0 = max(int(np.floor(v.min())) - 1, 0)
    v1 = min(int(np.ceil(v.max())) + 2, camera.height)
    if u0 >= u1 or v0 >= v1:
        return None
    return u0, u1, v0, v1


def raycast_scene(objects: Sequence[SceneObject], camera: CameraModel,
                  method: Literal["culled", "brute"] = "culled") -> Tuple[DepthImage, LabelImage]:
    """Render z-depth and object ids for meshes placed by object-to-world poses.

    Args:
        objects: (mesh, pose, id) triples with unique ids in 1..255
        camera: Camera intrinsics and camera-to-world pose
        method: "culled" visits only projected triangle bounds, "brute" tests every pixel

    Returns:
        Depth (0 where nothing is hit) and label (0 = background) images
    """
    ids = [int(obj_id) for _, _, obj_id in objects]
    if len(set(ids)) != len(ids) or any(not 0 < i < 256 for i in ids):
        raise RenderError("object ids must be unique and in 1..255")
    if method not in ("culled", "brute"):
        raise RenderError(f"unknown raycast method: {method}")

    cols = (np.arange(camera.width, dtype=np.float64) - camera.cx) / camera.fx
    rows = (np.arange(camera.height, dtype=np.float64) - camera.cy) / camera.fy
    dx, dy = np.meshgrid(cols, rows)
    depth = np.full((camera.height, camera.width), np.inf)
    labels = np.zeros((camera.height, camera.width), dtype=np.uint8)

    # rows: R^T (w - t) == (w - t) @ R
    rotation, origin = camera.pose.rotation, camera.pose.translation
    for mesh, pose, obj_id in objects:
        if mesh.is_empty:
            continue
        world = pose.transform_points(mesh.vertices)
        vertices = (world - origin) @ rotation
        for tri in vertices[mesh.triangles]:
            if method == "brute":
                window = (0, camera.width, 0, camera.height)
            else:
                window = _pixel_window(tri, camera)
                if window is None:
                    continue
            u0, u1, v0, v1 = window
            t = _intersect(dx[v0:v1, u0:u1], dy[v0:v1, u0:u1], tri)
            closer = t < depth[v0:v1, u0:u1]
            depth[v0:v1, u0:u1][closer] = t[closer]
            labels[v0:v1, u0:u1][closer] = obj_id

    depth[~np.isfinite(depth)] = 0.0
    return DepthImage(depth), LabelImage(labels)


def add_depth_noise(depth: DepthImage, sigma: float, rng: np.random.Generator) -> DepthImage:
    """Gaussian noise on hit pixels; values are clipped at 0."""
    if sigma <= 0:
        return depth
    values = depth.values.copy()
    hit = values > 0
    values[hit] = np.maximum(values[hit] + rng.normal(0.0, sigma, int(hit.sum())), 0.0)
    return DepthImage(values)


def depth_to_cloud(depth: DepthImage, camera: CameraModel, mask: Optional[LabelImage] = None,
                   ids: Union[int, Iterable[int], None] = None) -> PointCloud:
    """Back-project pixels with positive depth (and a label in ``ids``) to world points.

    Without a mask every hit pixel is used. Points are emitted in row-major
    pixel order.
    """
    if depth.width != camera.width or depth.height != camera.height:
        raise RenderError(f"depth image is {depth.width}x{depth.height}, camera is {camera.width}x{camera.height}")
    z = depth.values
    keep = z > 0
    if mask is not None:
        if mask.values.shape != z.shape:
            raise RenderError(f"mask is {mask.width}x{mask.height}, depth is {depth.width}x{depth.height}")
        if ids is not None:
            wanted = [ids] if isinstance(ids, (int, np.integer)) else list(ids)
            keep &= np.isin(mask.values, np.asarray(wanted, dtype=np.int64))
        else:
            keep &= mask.values > 0
    v, u = np.nonzero(keep)
    zs = z[v, u]
    points = np.stack([(u - camera.cx) * zs / camera.fx, (v - camera.cy) * zs / camera.fy, zs], axis=1)
    return PointCloud(camera.pose.transform_points(points))


def render_source_cloud(base_mesh: TriangleMesh, target: PointCloud,
                        camera: CameraModel) -> Tuple[PointCloud, RigidTransform]:
    """Place ``base_mesh`` at the target centroid and ray-cast it from ``camera``.

    Returns the back-projected source cloud and the translation-only placement
    transform that was applied to the mesh.
    """
    placement = RigidTransform.from_translation(centroid(target) - base_mesh.vertex_centroid())
    depth, labels = raycast_scene([(base_mesh, placement, 1)], camera)
    source = depth_to_cloud(depth, camera, labels, 1)
    if len(source) == 0:
        raise RenderError("source not visible")
    logger.debug("source render: %d points", len(source))
    return source, placement
