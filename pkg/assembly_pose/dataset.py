"""Assembly plans, hemisphere viewpoint sampling, and the step-indexed depth dataset.

On-disk layout (one sub-dataset per assembly step)::

    dataset_info.json
    step_01/depth/000000.png     16-bit z-depth, depth_scale millimeters per unit
    step_01/mask/000000.png      8-bit object ids, 0 = background
    step_01/scene_gt.json        per image: object-to-world poses (translations in mm)
    step_01/scene_camera.json    per image: K, camera-to-world pose, depth_scale

Step i renders the base (the first object plus the objects assembled in steps
1..i-1) and records the assembly object's target pose, which is the pose it has
once placed, i.e. in the configuration of step i+1 or the complete assembly.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import trimesh
from PIL import Image
from pydantic import TypeAdapter, ValidationError

from assembly_pose.geometry import RigidTransform, TriangleMesh, compose, load_mesh, merge_meshes
from assembly_pose.raycast import (
    CameraModel,
    DepthImage,
    LabelImage,
    SceneObject,
    add_depth_noise,
    raycast_scene,
)
from assembly_pose.schemas import (
    AssemblyDatasetSummary,
    CameraEntry,
    CameraIntrinsics,
    DatasetInfo,
    DatasetStepInfo,
    GtPoseEntry,
    PlanConfig,
    PrimitiveSpec,
    SamplingConfig,
    StepSummary,
    SymmetrySpec,
)

logger = logging.getLogger(__name__)

DATASET_INFO = "dataset_info.json"
SCENE_GT = "scene_gt.json"
SCENE_CAMERA = "scene_camera.json"
MAX_DEPTH_UNITS = 65535


class DatasetError(ValueError):
    """Raised for inconsistent plans and malformed dataset files."""


# ============================================================================
# Assembly plan
# ============================================================================

@dataclass(frozen=True, eq=False)
class PlanObject:
    id: int
    name: str
    mesh: TriangleMesh
    symmetry: Optional[SymmetrySpec] = None


@dataclass(frozen=True, eq=False)
class AssemblyStep:
    """One step; every pose is expressed in the first object's frame."""
    index: int
    base_ids: Tuple[int, ...]
    assembly_id: int
    base_mesh: TriangleMesh
    assembly_mesh: TriangleMesh
    relative_pose: RigidTransform
    symmetry: Optional[SymmetrySpec] = None
    occluders: Tuple[Tuple[int, RigidTransform], ...] = ()

    @property
    def directory(self) -> str:
        return f"step_{self.index:02d}"


@dataclass(frozen=True, eq=False)
class AssemblyPlan:
    """Resolved plan: meshes loaded, placements and cumulative bases derived."""
    name: str
    objects: Dict[int, PlanObject]
    steps: Tuple[AssemblyStep, ...]
    base_pose: RigidTransform
    placements: Dict[int, RigidTransform]
    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    @classmethod
    def from_config(cls, config: PlanConfig, root: Union[str, Path] = ".") -> "AssemblyPlan":
        """Resolve a validated plan; mesh paths are relative to ``root``.

        Raises:
            DatasetError: On unresolvable meshes or an inconsistent step order
        """
        root = Path(root)
        objects = {obj.id: PlanObject(obj.id, obj.name, _resolve_mesh(obj, config, root), obj.symmetry)
                   for obj in config.objects}
        first = config.objects[0].id
        placements = {first: RigidTransform.identity()}
        for step in config.steps:
            if step.assembly_object in placements:
                raise DatasetError(f"object {step.assembly_object} is assembled twice or is the first object")
            placements[step.assembly_object] = RigidTransform.from_matrix(step.relative_pose)

        steps, base_ids = [], [first]
        for index, step in enumerate(config.steps, start=1):
            if step.base is not None and sorted(step.base) != sorted(base_ids):
                raise DatasetError(f"step {index}: declared base {sorted(step.base)} does not match "
                                   f"derived base {sorted(base_ids)}")
            occluders = []
            for occluder in step.occluders:
                if occluder.object in base_ids or occluder.object == step.assembly_object:
                    raise DatasetError(f"step {index}: occluder {occluder.object} is part of the step")
                occluders.append((occluder.object, RigidTransform.from_matrix(occluder.pose)))
            assembly = objects[step.assembly_object]
            steps.append(AssemblyStep(
                index=index,
                base_ids=tuple(base_ids),
                assembly_id=assembly.id,
                base_mesh=merge_meshes([objects[i].mesh.transformed(placements[i]) for i in base_ids]),
                assembly_mesh=assembly.mesh,
                relative_pose=placements[assembly.id],
                symmetry=step.symmetry if step.symmetry is not None else assembly.symmetry,
                occluders=tuple(occluders),
            ))
            base_ids = base_ids + [assembly.id]

        return cls(config.name, objects, tuple(steps), RigidTransform.from_matrix(config.base_pose),
                   placements, config.camera, config.sampling)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "AssemblyPlan":
        path = Path(path)
        return cls.from_config(PlanConfig.from_file(path), path.parent)

    def step(self, index: int) -> AssemblyStep:
        if not 1 <= index <= len(self.steps):
            raise DatasetError(f"plan '{self.name}' has no step {index}")
        return self.steps[index - 1]

    def world_pose(self, object_id: int) -> RigidTransform:
        """Ground-truth pose of a placed object in the complete assembly."""
        return compose(self.base_pose, self.placements[object_id])

    def assembled_mesh(self) -> TriangleMesh:
        """Every placed object in world coordinates."""
        return merge_meshes([self.objects[i].mesh.transformed(self.world_pose(i)) for i in self.placements])


def _primitive(spec: PrimitiveSpec) -> trimesh.Trimesh:
    if spec.type == "box":
        if spec.extents is None:
            raise DatasetError("box primitive needs 'extents'")
        return trimesh.creation.box(extents=spec.extents)
    if spec.type == "icosphere":
        return trimesh.creation.icosphere(subdivisions=spec.subdivisions, radius=spec.radius or 1.0)
    if spec.radius is None or spec.height is None:
        raise DatasetError(f"{spec.type} primitive needs 'radius' and 'height'")
    if spec.type == "cylinder":
        return trimesh.creation.cylinder(radius=spec.radius, height=spec.height, sections=spec.sections)
    if spec.type == "cone":
        return trimesh.creation.cone(radius=spec.radius, height=spec.height, sections=spec.sections)
    return trimesh.creation.capsule(height=spec.height, radius=spec.radius, count=[spec.sections, spec.sections])


def _resolve_mesh(obj, config: PlanConfig, root: Path) -> TriangleMesh:
    if obj.primitive is not None:
        mesh = TriangleMesh.from_trimesh(_primitive(obj.primitive), scale=obj.scale or 1.0, name=obj.name)
    else:
        path = root / obj.mesh
        if not path.is_file():
            raise DatasetError(f"object {obj.id}: mesh file not found: {path}")
        mesh = load_mesh(path, scale=obj.scale if obj.scale is not None else config.unit_scale)
    if mesh.is_empty:
        raise DatasetError(f"object {obj.id}: empty mesh")
    return mesh


# ============================================================================
# Hemisphere sampling
# ============================================================================

@dataclass(frozen=True)
class HemisphereSampling:
    """Camera positions on spheres around ``look_at``: yaw x pitch x scale."""
    yaw_values: Tuple[float, ...]
    pitch_values: Tuple[float, ...]
    scale_values: Tuple[float, ...]
    look_at: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.yaw_values and self.pitch_values and self.scale_values):
            raise DatasetError("hemisphere sampling needs at least one yaw, pitch and scale value")
        if any(not 0.0 < p <= np.pi / 2 for p in self.pitch_values):
            raise DatasetError("pitch values must lie in (0, pi/2]")
        if any(s <= 0.0 for s in self.scale_values):
            raise DatasetError("scale values must be positive")

    @classmethod
    def from_config(cls, config: SamplingConfig,
                    look_at: Sequence[float] = (0.0, 0.0, 0.0)) -> "HemisphereSampling":
        """Evenly spaced yaw over the full circle, pitch and scale over their ranges."""
        yaw = 2.0 * np.pi * np.arange(config.yaw_count) / config.yaw_count
        pitch = np.linspace(config.pitch_min, config.pitch_max, config.pitch_count)
        scale = np.linspace(config.scale_min, config.scale_max, config.scale_count)
        target = config.look_at if config.look_at is not None else look_at
        return cls(tuple(yaw.tolist()), tuple(pitch.tolist()), tuple(scale.tolist()),
                   tuple(float(v) for v in target))

    def __len__(self) -> int:
        return len(self.yaw_values) * len(self.pitch_values) * len(self.scale_values)


def hemisphere_poses(sampling: HemisphereSampling) -> List[RigidTransform]:
    """Camera-to-world poses looking at ``sampling.look_at``, roll-free with world +z up.

    Order: yaw outermost, then pitch, then scale.
    """
    look_at = np.asarray(sampling.look_at, dtype=np.float64)
    up = np.array([0.0, 0.0, 1.0])
    poses = []
    for phi in sampling.yaw_values:
        for theta in sampling.pitch_values:
            for s in sampling.scale_values:
                direction = np.array([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), np.sin(theta)])
                position = look_at + s * direction
                z_axis = -direction
                x_axis = np.cross(z_axis, up)
                norm = np.linalg.norm(x_axis)
                if norm < 1e-9:
                    # looking straight down: keep the yaw as the image x direction
                    x_axis = np.array([-np.sin(phi), np.cos(phi), 0.0])
                else:
                    x_axis /= norm
                y_axis = np.cross(z_axis, x_axis)
                poses.append(RigidTransform(np.column_stack([x_axis, y_axis, z_axis]), position))
    return poses


# ============================================================================
# Scene records and IO
# ============================================================================

@dataclass(frozen=True, eq=False)
class SceneRecord:
    """One rendered view of one assembly step."""
    depth: DepthImage
    labels: LabelImage
    camera: CameraModel
    object_poses: Dict[int, RigidTransform]
    step_index: int
    image_id: int
    assembly_object_id: int

    @property
    def assembly_pose(self) -> RigidTransform:
        return self.object_poses[self.assembly_object_id]


def _canonical(t: RigidTransform) -> Tuple[List[float], List[float]]:
    """Row-major rotation and millimeter translation exactly as written to JSON."""
    return [float(v) for v in t.rotation.reshape(-1)], [float(v) * 1000.0 for v in t.translation]


def _from_canonical(rotation: Sequence[float], translation_mm: Sequence[float]) -> RigidTransform:
    return RigidTransform(np.asarray(rotation, dtype=np.float64).reshape(3, 3),
                          np.asarray(translation_mm, dtype=np.float64) / 1000.0)


def _write_json(path: Path, payload: Any) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def write_depth_png(path: Path, depth: DepthImage, depth_scale: float) -> None:
    units = np.rint(depth.values * 1000.0 / depth_scale)
    Image.fromarray(np.clip(units, 0, MAX_DEPTH_UNITS).astype(np.uint16)).save(path)


def read_depth_png(path: Path, depth_scale: float) -> DepthImage:
    with Image.open(path) as image:
        units = np.asarray(image, dtype=np.float64)
    return DepthImage(units * depth_scale / 1000.0)


def _render_view(plan: AssemblyPlan, step: AssemblyStep, camera: CameraModel,
                 image_id: int, seed: int, out_dir: Path) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    scene: List[SceneObject] = [(plan.objects[i].mesh, plan.world_pose(i), i) for i in step.base_ids]
    scene += [(plan.objects[i].mesh, compose(plan.base_pose, pose), i) for i, pose in step.occluders]
    depth, labels = raycast_scene(scene, camera)
    sigma = plan.camera.depth_noise_sigma
    if sigma > 0:
        depth = add_depth_noise(depth, sigma, np.random.default_rng([seed, step.index, image_id]))

    name = f"{image_id:06d}.png"
    write_depth_png(out_dir / "depth" / name, depth, camera.depth_scale)
    Image.fromarray(labels.values).save(out_dir / "mask" / name)

    rotation, translation = _canonical(camera.pose)
    camera_entry = CameraEntry(cam_K=camera.K.reshape(-1).tolist(), cam_R_c2w=rotation, cam_t_c2w=translation,
                               depth_scale=camera.depth_scale, width=camera.width, height=camera.height)
    gt_entries = []
    for object_id, pose in [(i, plan.world_pose(i)) for i in step.base_ids] + \
            [(i, compose(plan.base_pose, pose)) for i, pose in step.occluders]:
        rotation, translation = _canonical(pose)
        gt_entries.append(GtPoseEntry(obj_id=object_id, R_m2w=rotation, t_m2w=translation).model_dump())
    rotation, translation = _canonical(plan.world_pose(step.assembly_id))
    gt_entries.append(GtPoseEntry(obj_id=step.assembly_id, R_m2w=rotation, t_m2w=translation,
                                  assembly_target=True).model_dump())
    return camera_entry.model_dump(), gt_entries


def generate_dataset(plan: AssemblyPlan, sampling: HemisphereSampling, out_path: Union[str, Path],
                     camera_intrinsics: Optional[CameraIntrinsics] = None, seed: int = 0,
                     threads: int = 1) -> AssemblyDatasetSummary:
    """Render every step from every hemisphere viewpoint and write the dataset.

    Output bytes depend only on (plan, sampling, intrinsics, seed), never on
    ``threads``.
    """
    intrinsics = camera_intrinsics or plan.camera
    poses = hemisphere_poses(sampling)
    out_path = Path(out_path)
    out_path.mkdir(parents=True, exist_ok=True)

    steps, summaries = [], []
    for step in plan.steps:
        step_dir = out_path / step.directory
        (step_dir / "depth").mkdir(parents=True, exist_ok=True)
        (step_dir / "mask").mkdir(parents=True, exist_ok=True)
        logger.info("rendering %s: %d views of objects %s", step.directory, len(poses), list(step.base_ids))

        def render(indexed: Tuple[int, RigidTransform]):
            image_id, pose = indexed
            return _render_view(plan, step, CameraModel.from_intrinsics(intrinsics, pose),
                                image_id, seed, step_dir)

        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(render, enumerate(poses)))

        _write_json(step_dir / SCENE_CAMERA, {str(i): camera for i, (camera, _) in enumerate(results)})
        _write_json(step_dir / SCENE_GT, {str(i): gt for i, (_, gt) in enumerate(results)})
        steps.append(DatasetStepInfo(step=step.index, directory=step.directory, records=len(results),
                                     base_ids=list(step.base_ids), assembly_object=step.assembly_id))
        summaries.append(StepSummary(step=step.index, records=len(results), directory=step.directory))

    _write_json(out_path / DATASET_INFO, DatasetInfo(name=plan.name, seed=seed, steps=steps).model_dump())
    return AssemblyDatasetSummary(name=plan.name, steps=summaries)


def _read_validated(path: Path, adapter: TypeAdapter) -> Any:
    if not path.is_file():
        raise DatasetError(f"{path}: file not found")
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not valid JSON ({exc})") from exc
    try:
        return adapter.validate_python(payload)
    except ValidationError as exc:
        error = exc.errors()[0]
        location = ".".join(str(part) for part in error["loc"])
        raise DatasetError(f"{path}: field '{location}': {error['msg']}") from exc


_CAMERAS = TypeAdapter(Dict[str, CameraEntry])
_POSES = TypeAdapter(Dict[str, List[GtPoseEntry]])


def read_dataset_info(path: Union[str, Path]) -> DatasetInfo:
    return _read_validated(Path(path) / DATASET_INFO, TypeAdapter(DatasetInfo))


def _camera_from_entry(entry: CameraEntry) -> CameraModel:
    k = np.asarray(entry.cam_K).reshape(3, 3)
    return CameraModel(float(k[0, 0]), float(k[1, 1]), float(k[0, 2]), float(k[1, 2]),
                       entry.width, entry.height, _from_canonical(entry.cam_R_c2w, entry.cam_t_c2w),
                       entry.depth_scale)


def load_step(path: Union[str, Path], info: DatasetStepInfo) -> Iterator[SceneRecord]:
    """Records of one step in image id order."""
    step_dir = Path(path) / info.directory
    cameras = _read_validated(step_dir / SCENE_CAMERA, _CAMERAS)
    poses = _read_validated(step_dir / SCENE_GT, _POSES)
    for image_id in range(info.records):
        key = str(image_id)
        if key not in cameras:
            raise DatasetError(f"{step_dir / SCENE_CAMERA}: field '{key}': missing image")
        if key not in poses:
            raise DatasetError(f"{step_dir / SCENE_GT}: field '{key}': missing image")
        entry = cameras[key]
        name = f"{image_id:06d}.png"
        depth_path, mask_path = step_dir / "depth" / name, step_dir / "mask" / name
        for image_path in (depth_path, mask_path):
            if not image_path.is_file():
                raise DatasetError(f"{image_path}: file not found")
        depth = read_depth_png(depth_path, entry.depth_scale)
        with Image.open(mask_path) as image:
            labels = LabelImage(np.asarray(image))

        object_poses, target = {}, None
        for gt in poses[key]:
            object_poses[gt.obj_id] = _from_canonical(gt.R_m2w, gt.t_m2w)
            if gt.assembly_target:
                target = gt.obj_id
        if target is None:
            raise DatasetError(f"{step_dir / SCENE_GT}: field '{key}': no assembly_target entry")
        missing = labels.ids() - set(object_poses)
        if missing:
            raise DatasetError(f"{step_dir / SCENE_GT}: field '{key}': no pose for labeled ids {sorted(missing)}")
        yield SceneRecord(depth, labels, _camera_from_entry(entry), object_poses, info.step, image_id, target)


def load_dataset(path: Union[str, Path]) -> Iterator[SceneRecord]:
    """Every record of a generated dataset, ordered by step then image id."""
    info = read_dataset_info(path)
    for step in info.steps:
        yield from load_step(path, step)
