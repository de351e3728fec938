"""Pydantic schemas for configuration files, on-disk records and report rows."""

import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

IDENTITY_4X4 = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]


def _check_matrix(values: List[float]) -> List[float]:
    if len(values) != 16:
        raise ValueError(f"expected 16 row-major entries of a 4x4 matrix, got {len(values)}")
    return values


class StrictModel(BaseModel):
    """Base for config models: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")


# ============================================================================
# Assembly plan
# ============================================================================

class SymmetrySpec(StrictModel):
    """Global symmetries of an object about one axis through ``origin``."""
    axis: List[float] = Field(default_factory=lambda: [0.0, 0.0, 1.0], min_length=3, max_length=3,
                              description="Symmetry axis in the object frame")
    origin: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0], min_length=3, max_length=3,
                                description="A point on the axis (meters, object frame)")
    order: int = Field(default=1, ge=1, description="Discrete rotation order n (1 = none)")
    continuous: bool = Field(default=False, description="Continuous rotational symmetry about the axis")
    samples: int = Field(default=36, ge=1, description="Discretization of a continuous symmetry")


class PrimitiveSpec(StrictModel):
    """A mesh built with trimesh.creation instead of loaded from a file (meters)."""
    type: Literal["box", "cylinder", "cone", "icosphere", "capsule"] = Field(..., description="Primitive kind")
    extents: Optional[List[float]] = Field(default=None, min_length=3, max_length=3, description="Box extents")
    radius: Optional[float] = Field(default=None, gt=0, description="Radius for round primitives")
    height: Optional[float] = Field(default=None, gt=0, description="Height for cylinder/cone/capsule")
    sections: int = Field(default=32, ge=3, description="Angular resolution for round primitives")
    subdivisions: int = Field(default=3, ge=0, description="Icosphere subdivisions")


class ObjectConfig(StrictModel):
    """One part of the assembly."""
    id: int = Field(..., ge=1, le=255, description="Object id, also its label value in mask images")
    name: str = Field(..., description="Human-readable part name")
    mesh: Optional[str] = Field(default=None, description="STL/OBJ path, relative to the plan file")
    primitive: Optional[PrimitiveSpec] = Field(default=None, description="Primitive used instead of a file")
    scale: Optional[float] = Field(default=None, gt=0, description="File units to meters (defaults to plan unit_scale)")
    symmetry: Optional[SymmetrySpec] = Field(default=None, description="Global symmetries of the part")

    @model_validator(mode="after")
    def check_one_source(self) -> "ObjectConfig":
        if (self.mesh is None) == (self.primitive is None):
            raise ValueError(f"object {self.id}: give exactly one of 'mesh' or 'primitive'")
        return self


class OccluderConfig(StrictModel):
    """An extra object rendered into a step's scenes but not part of the base."""
    object: int = Field(..., ge=1, description="Id of the occluding object")
    pose: List[float] = Field(..., description="Pose in the first object's frame (4x4 row-major)")

    @field_validator("pose")
    @classmethod
    def check_pose(cls, values: List[float]) -> List[float]:
        return _check_matrix(values)


class StepConfig(StrictModel):
    """One assembly step: place ``assembly_object`` onto the current base."""
    assembly_object: int = Field(..., ge=1, description="Id of the object assembled in this step")
    relative_pose: List[float] = Field(..., description="T_b^a, pose of the assembly object in the first object's frame (4x4 row-major)")
    base: Optional[List[int]] = Field(default=None, description="Optional explicit base ids (must match the derived base)")
    symmetry: Optional[SymmetrySpec] = Field(default=None, description="Overrides the assembly object's symmetry")
    occluders: List[OccluderConfig] = Field(default_factory=list, description="Objects that partly hide the base")

    @field_validator("relative_pose")
    @classmethod
    def check_relative_pose(cls, values: List[float]) -> List[float]:
        return _check_matrix(values)


class CameraIntrinsics(StrictModel):
    """Pinhole intrinsics; defaults mimic a RealSense-class sensor at VGA."""
    fx: float = Field(default=615.0, gt=0)
    fy: float = Field(default=615.0, gt=0)
    cx: float = Field(default=320.0, gt=0)
    cy: float = Field(default=240.0, gt=0)
    width: int = Field(default=640, ge=1)
    height: int = Field(default=480, ge=1)
    depth_scale: float = Field(default=0.1, gt=0, description="Millimeters per depth PNG unit")
    depth_noise_sigma: float = Field(default=0.0, ge=0, description="Gaussian depth noise (meters)")

    @model_validator(mode="after")
    def check_principal_point(self) -> "CameraIntrinsics":
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        return self


class SamplingConfig(StrictModel):
    """Hemisphere viewpoint grid; counts multiply to views per step."""
    yaw_count: int = Field(default=8, ge=1)
    pitch_count: int = Field(default=3, ge=1)
    scale_count: int = Field(default=2, ge=1)
    pitch_min: float = Field(default=math.radians(20.0), gt=0, le=math.pi / 2)
    pitch_max: float = Field(default=math.radians(70.0), gt=0, le=math.pi / 2)
    scale_min: float = Field(default=0.25, gt=0, description="Camera distance (meters)")
    scale_max: float = Field(default=0.40, gt=0, description="Camera distance (meters)")
    look_at: Optional[List[float]] = Field(default=None, min_length=3, max_length=3,
                                           description="Defaults to the centroid of the complete assembly")

    @model_validator(mode="after")
    def check_ranges(self) -> "SamplingConfig":
        if self.pitch_min > self.pitch_max or self.scale_min > self.scale_max:
            raise ValueError("sampling ranges must satisfy min <= max")
        return self


class PlanConfig(StrictModel):
    """Human-editable assembly plan file."""
    name: str = Field(..., description="Assembly name")
    unit_scale: float = Field(default=0.001, gt=0, description="Default file units to meters")
    base_pose: List[float] = Field(default_factory=lambda: list(IDENTITY_4X4),
                                   description="World pose of the first object (4x4 row-major)")
    objects: List[ObjectConfig] = Field(..., min_length=2)
    steps: List[StepConfig] = Field(..., min_length=1)
    camera: CameraIntrinsics = Field(default_factory=CameraIntrinsics)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)

    @field_validator("base_pose")
    @classmethod
    def check_base_pose(cls, values: List[float]) -> List[float]:
        return _check_matrix(values)

    @model_validator(mode="after")
    def check_ids(self) -> "PlanConfig":
        ids = [obj.id for obj in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        for step in self.steps:
            if step.assembly_object not in ids:
                raise ValueError(f"step references unknown object {step.assembly_object}")
            for occluder in step.occluders:
                if occluder.object not in ids:
                    raise ValueError(f"occluder references unknown object {occluder.object}")
        return self

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "PlanConfig":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.model_validate(yaml.safe_load(handle))


# ============================================================================
# Registration parameters
# ============================================================================

class RegistrationParams(StrictModel):
    """Global RANSAC + point-to-plane ICP settings (lengths in meters)."""
    distance_threshold: float = Field(default=0.036, gt=0, description="Inlier distance for RANSAC, ICP and fitness")
    distance_mode: Literal["absolute", "relative"] = Field(default="absolute",
                                                           description="relative: threshold = factor x base mesh diameter")
    relative_distance_factor: float = Field(default=0.05, gt=0)
    edge_length_factor: float = Field(default=0.9, gt=0, le=1, description="Edge-length similarity pruning constant")
    ransac_max_iterations: int = Field(default=100_000, ge=1)
    ransac_min_iterations: int = Field(default=10_000, ge=0, description="Floor before the confidence stop, capped by the maximum")
    ransac_sample_size: int = Field(default=3, ge=3)
    ransac_confidence: float = Field(default=0.999, gt=0, lt=1)
    ransac_candidates: int = Field(default=8, ge=1, description="Pose-distinct hypotheses re-scored on the full clouds")
    icp_max_iterations: int = Field(default=50, ge=1)
    icp_relative_fitness_eps: float = Field(default=1e-6, gt=0)
    icp_relative_rmse_eps: float = Field(default=1e-6, gt=0)
    icp_full_resolution: bool = Field(default=True, description="Refine on full clouds instead of downsampled ones")
    voxel_size: Optional[float] = Field(default=None, gt=0, description="Defaults to 0.2 x distance threshold")
    normal_radius_factor: float = Field(default=2.0, gt=0, description="Normal radius in voxels")
    fpfh_radius_factor: float = Field(default=5.0, gt=0, description="FPFH radius in voxels")
    normal_max_nn: int = Field(default=30, ge=3)
    fpfh_max_nn: int = Field(default=100, ge=1)
    mutual_filter: bool = Field(default=False, description="Keep only mutual nearest feature matches")
    seed: int = Field(default=0, ge=0)

    @property
    def effective_voxel_size(self) -> float:
        return self.voxel_size if self.voxel_size is not None else 0.2 * self.distance_threshold

    def resolved(self, mesh_diameter: float) -> "RegistrationParams":
        """Absolute-mode copy with the threshold fixed for a mesh of the given diameter."""
        if self.distance_mode == "absolute":
            return self
        return self.model_copy(update={
            "distance_mode": "absolute",
            "distance_threshold": self.relative_distance_factor * mesh_diameter,
        })

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RegistrationParams":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.model_validate(yaml.safe_load(handle) or {})

    def to_file(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            yaml.safe_dump(self.model_dump(), handle, sort_keys=True)


# ============================================================================
# Dataset and run records
# ============================================================================

class GtPoseEntry(BaseModel):
    """One object of one image in scene_gt.json (model-to-world)."""
    model_config = ConfigDict(extra="forbid")

    obj_id: int = Field(..., ge=1, le=255)
    R_m2w: List[float] = Field(..., min_length=9, max_length=9, description="Row-major rotation")
    t_m2w: List[float] = Field(..., min_length=3, max_length=3, description="Translation in millimeters")
    assembly_target: bool = Field(default=False, description="Pose the assembly object must reach; not rendered")


class CameraEntry(BaseModel):
    """One image in scene_camera.json."""
    model_config = ConfigDict(extra="forbid")

    cam_K: List[float] = Field(..., min_length=9, max_length=9, description="Row-major intrinsic matrix")
    cam_R_c2w: List[float] = Field(..., min_length=9, max_length=9, description="Row-major camera-to-world rotation")
    cam_t_c2w: List[float] = Field(..., min_length=3, max_length=3, description="Camera position in millimeters")
    depth_scale: float = Field(..., gt=0, description="Millimeters per depth PNG unit")
    width: int = Field(..., ge=1)
    height: int = Field(..., ge=1)


class DatasetStepInfo(BaseModel):
    step: int = Field(..., ge=1)
    directory: str
    records: int = Field(..., ge=0)
    base_ids: List[int]
    assembly_object: int


class DatasetInfo(BaseModel):
    """dataset_info.json at the dataset root."""
    name: str
    seed: int
    steps: List[DatasetStepInfo]


class StepSummary(BaseModel):
    step: int = Field(..., description="1-based assembly step")
    records: int = Field(..., description="Scene records written")
    directory: str = Field(..., description="Sub-dataset directory name")


class AssemblyDatasetSummary(BaseModel):
    """Result of dataset generation."""
    name: str
    steps: List[StepSummary]

    @property
    def total_records(self) -> int:
        return sum(step.records for step in self.steps)


class EstimateLine(BaseModel):
    """One line of estimates.jsonl."""
    step: int
    record: int
    T_w_a: List[List[float]] = Field(..., description="Estimated assembly pose, 4x4")
    T_w_b: List[List[float]] = Field(..., description="Estimated base pose, 4x4")
    fitness: float
    inlier_rmse: float
    flagged: bool = False


class TimingLine(BaseModel):
    step: int
    record: int
    elapsed: float = Field(..., ge=0, description="Wall time of the estimate in seconds")


class FailureLine(BaseModel):
    step: int
    record: int
    error: str


class EvalRow(BaseModel):
    """Per-step aggregate, in the column order of the results table."""
    step: int
    fitness_mean: float
    fitness_stdv: float = Field(..., ge=0)
    rmse_mean: float
    rmse_stdv: float = Field(..., ge=0)
    adi_mean: float
    adi_stdv: float = Field(..., ge=0)
    mssd_mean: float
    mssd_stdv: float = Field(..., ge=0)
    time_mean: float
    count: int = Field(default=0, description="Estimates aggregated (not written to CSV)")
    failures: int = Field(default=0, description="Flagged or errored records (not written to CSV)")

    @classmethod
    def csv_columns(cls) -> List[str]:
        return ["step", "fitness_mean", "fitness_stdv", "rmse_mean", "rmse_stdv",
                "adi_mean", "adi_stdv", "mssd_mean", "mssd_stdv", "time_mean"]

    def csv_values(self) -> Dict[str, Any]:
        return {column: getattr(self, column) for column in self.csv_columns()}


_FLAGS = {"plan_path": "--plan", "dataset_path": "--dataset", "output_path": "--out"}


class RunConfig(StrictModel):
    """Validated command line."""
    command: Literal["gen", "estimate", "eval", "report"]
    plan_path: Optional[Path] = None
    dataset_path: Optional[Path] = None
    params_path: Optional[Path] = None
    seed: Optional[int] = Field(default=None, ge=0, description="Overrides the params and sampling seed")
    output_path: Optional[Path] = None
    overlay: bool = False
    views: Optional[Dict[str, int]] = Field(default=None, description="yaw/pitch/scale counts")
    threads: int = Field(default=1, ge=1)
    segmenter: str = "ground_truth"

    @model_validator(mode="after")
    def check_paths(self) -> "RunConfig":
        needed = {
            "gen": ["plan_path", "dataset_path"],
            "estimate": ["plan_path", "dataset_path", "output_path"],
            "eval": ["plan_path", "dataset_path", "output_path"],
            "report": ["output_path"],
        }[self.command]
        missing = [name for name in needed if getattr(self, name) is None]
        if missing:
            flags = ", ".join(_FLAGS[name] for name in missing)
            raise ValueError(f"'{self.command}' requires {flags}")
        read_paths = {"gen": ["plan_path"], "estimate": ["plan_path", "dataset_path"],
                      "eval": ["plan_path", "dataset_path"], "report": []}[self.command]
        for name in read_paths:
            path = getattr(self, name)
            if not path.exists():
                raise ValueError(f"{_FLAGS[name]} path does not exist: {path}")
        return self
