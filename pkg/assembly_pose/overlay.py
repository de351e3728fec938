"""Bounding-box overlay images: ground truth in red, estimate in green."""

from pathlib import Path
from typing import Optional, Union

import numpy as np
from numpy.typing import NDArray
from PIL import Image, ImageDraw

from assembly_pose.geometry import AxisAlignedBox, RigidTransform
from assembly_pose.raycast import CameraModel, DepthImage

GT_COLOR = (255, 0, 0)
EST_COLOR = (0, 255, 0)

# corner index pairs differing in exactly one bit
BOX_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8) if bin(a ^ b).count("1") == 1]


def project(points: NDArray, camera: CameraModel) -> Optional[NDArray]:
    """Pixel coordinates of world points, or None if any lies behind the camera."""
    local = (np.asarray(points, dtype=np.float64) - camera.pose.translation) @ camera.pose.rotation
    if np.any(local[:, 2] <= 0):
        return None
    return np.stack([camera.fx * local[:, 0] / local[:, 2] + camera.cx,
                     camera.fy * local[:, 1] / local[:, 2] + camera.cy], axis=1)


def depth_background(depth: DepthImage) -> Image.Image:
    """Grayscale RGB rendering of a depth image; near is bright, misses are black."""
    values = depth.values
    hit = values > 0
    gray = np.zeros(values.shape, dtype=np.uint8)
    if hit.any():
        near, far = values[hit].min(), values[hit].max()
        span = far - near if far > near else 1.0
        gray[hit] = np.rint(255.0 - 191.0 * (values[hit] - near) / span).astype(np.uint8)
    return Image.fromarray(np.stack([gray] * 3, axis=-1))


def draw_box(image: Image.Image, box: AxisAlignedBox, pose: RigidTransform, camera: CameraModel,
             color) -> bool:
    """Draw the 12 edges of ``box`` placed by ``pose``; False if it could not be projected."""
    pixels = project(pose.transform_points(box.corners()), camera)
    if pixels is None:
        return False
    draw = ImageDraw.Draw(image)
    for a, b in BOX_EDGES:
        draw.line([tuple(pixels[a]), tuple(pixels[b])], fill=color, width=1)
    return True


def render_overlay(depth: DepthImage, camera: CameraModel, box: AxisAlignedBox, gt: RigidTransform,
                   est: RigidTransform, path: Union[str, Path]) -> None:
    """Write an 8-bit RGB PNG with both boxes over the depth image."""
    image = depth_background(depth)
    draw_box(image, box, gt, camera, GT_COLOR)
    draw_box(image, box, est, camera, EST_COLOR)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    image.save(path)
