"""Pose error metrics and the per-step evaluation report.

ADI: mean, over model points posed by the ground truth, of the distance to the
nearest model point posed by the estimate.
MSSD: over the object's symmetry transforms y, the smallest maximum vertex
displacement ||gt x - est (y x)||.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.transform import Rotation

from assembly_pose import spatial
from assembly_pose.dataset import AssemblyPlan, SceneRecord
from assembly_pose.geometry import GeometryError, PointCloud, RigidTransform, sample_mesh_surface
from assembly_pose.schemas import EstimateLine, EvalRow, FailureLine, SymmetrySpec

logger = logging.getLogger(__name__)

MODEL_SAMPLES = 30_000

# (step, record) -> (assembly object id, ground-truth pose)
GroundTruth = Dict[Tuple[int, int], Tuple[int, RigidTransform]]


class EvaluationError(ValueError):
    """Raised when estimates cannot be matched to ground truth."""


@dataclass(frozen=True)
class SymmetrySet:
    """Global symmetry transforms of an object; the identity comes first."""
    transforms: Tuple[RigidTransform, ...]

    @classmethod
    def identity(cls) -> "SymmetrySet":
        return cls((RigidTransform.identity(),))

    @classmethod
    def from_spec(cls, spec: Optional[SymmetrySpec]) -> "SymmetrySet":
        """Rotations about ``spec.axis`` through ``spec.origin``.

        A continuous symmetry is discretized into ``spec.samples`` steps,
        otherwise ``spec.order`` equal steps are used.
        """
        if spec is None:
            return cls.identity()
        axis = np.asarray(spec.axis, dtype=np.float64)
        norm = np.linalg.norm(axis)
        if norm == 0.0:
            raise GeometryError("symmetry axis must be non-zero")
        axis /= norm
        origin = np.asarray(spec.origin, dtype=np.float64)
        count = spec.samples if spec.continuous else spec.order
        transforms = [RigidTransform.identity()]
        for k in range(1, count):
            rotation = Rotation.from_rotvec(axis * (2.0 * np.pi * k / count)).as_matrix()
            transforms.append(RigidTransform(rotation, origin - rotation @ origin))
        return cls(tuple(transforms))

    def __len__(self) -> int:
        return len(self.transforms)


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """Surface samples (for ADI) and raw vertices (for MSSD) of one object."""
    points: PointCloud
    vertices: NDArray


def adi(gt: RigidTransform, est: RigidTransform, model_points: PointCloud) -> float:
    if len(model_points) == 0:
        raise GeometryError("empty model")
    posed_gt = gt.transform_points(model_points.points)
    posed_est = est.transform_points(model_points.points)
    dist, _ = spatial.build(posed_est).nearest(posed_gt)
    return float(dist.mean())


def mssd(gt: RigidTransform, est: RigidTransform, vertices: NDArray,
         symmetries: Optional[SymmetrySet] = None) -> float:
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if len(vertices) == 0:
        raise GeometryError("empty vertices")
    posed_gt = gt.transform_points(vertices)
    best = np.inf
    for y in (symmetries or SymmetrySet.identity()).transforms:
        posed_est = est.transform_points(y.transform_points(vertices))
        best = min(best, float(np.linalg.norm(posed_gt - posed_est, axis=1).max()))
    return best


def build_models(plan: AssemblyPlan, samples: int = MODEL_SAMPLES, seed: int = 0) -> Dict[int, ObjectModel]:
    """Models of every object assembled in the plan."""
    return {step.assembly_id: ObjectModel(sample_mesh_surface(step.assembly_mesh, samples, seed),
                                          step.assembly_mesh.vertices)
            for step in plan.steps}


def ground_truth_poses(records: Iterable[SceneRecord]) -> GroundTruth:
    return {(record.step_index, record.image_id): (record.assembly_object_id, record.assembly_pose)
            for record in records}


def _stats(values: List[float]) -> Tuple[float, float]:
    array = np.asarray(values, dtype=np.float64)
    return float(array.mean()), float(array.std())


def evaluate_estimates(estimates: Sequence[EstimateLine], ground_truth: GroundTruth, plan: AssemblyPlan,
                       models: Dict[int, ObjectModel],
                       timings: Optional[Dict[Tuple[int, int], float]] = None,
                       failures: Sequence[FailureLine] = ()) -> List[EvalRow]:
    """Per-step mean and standard deviation of fitness, RMSE, ADI and MSSD.

    Every estimate is scored against its own record's ground truth; nothing
    carries over between steps.

    Raises:
        EvaluationError: If an estimate has no ground-truth record
    """
    per_step: Dict[int, Dict[str, List[float]]] = {}
    flagged: Dict[int, int] = {}
    for line in estimates:
        key = (line.step, line.record)
        if key not in ground_truth:
            raise EvaluationError(f"no ground truth for step {line.step} record {line.record}")
        object_id, gt = ground_truth[key]
        model = models.get(object_id)
        if model is None:
            raise EvaluationError(f"no model for object {object_id} (step {line.step} record {line.record})")
        est = RigidTransform.from_matrix(line.T_w_a)
        symmetries = SymmetrySet.from_spec(plan.step(line.step).symmetry)

        values = per_step.setdefault(line.step, {"fitness": [], "rmse": [], "adi": [], "mssd": [], "time": []})
        values["fitness"].append(line.fitness)
        values["rmse"].append(line.inlier_rmse)
        values["adi"].append(adi(gt, est, model.points))
        values["mssd"].append(mssd(gt, est, model.vertices, symmetries))
        values["time"].append((timings or {}).get(key, 0.0))
        flagged[line.step] = flagged.get(line.step, 0) + int(line.flagged)

    errored: Dict[int, int] = {}
    for failure in failures:
        errored[failure.step] = errored.get(failure.step, 0) + 1

    rows = []
    for step in sorted(per_step):
        values = per_step[step]
        fitness_mean, fitness_stdv = _stats(values["fitness"])
        rmse_mean, rmse_stdv = _stats(values["rmse"])
        adi_mean, adi_stdv = _stats(values["adi"])
        mssd_mean, mssd_stdv = _stats(values["mssd"])
        failed = flagged.get(step, 0) + errored.get(step, 0)
        if failed:
            logger.info("step %d: %d failed records", step, failed)
        rows.append(EvalRow(step=step, fitness_mean=fitness_mean, fitness_stdv=fitness_stdv,
                            rmse_mean=rmse_mean, rmse_stdv=rmse_stdv, adi_mean=adi_mean, adi_stdv=adi_stdv,
                            mssd_mean=mssd_mean, mssd_stdv=mssd_stdv, time_mean=_stats(values["time"])[0],
                            count=len(values["fitness"]), failures=failed))
    return rows


# ============================================================================
# Report output
# ============================================================================

def format_table(rows: Sequence[EvalRow]) -> str:
    """Aligned plain-text table with the CSV column order."""
    columns = EvalRow.csv_columns()
    cells = [columns] + [[str(row.step)] + [f"{row.csv_values()[c]:.6f}" for c in columns[1:]] for row in rows]
    widths = [max(len(line[i]) for line in cells) for i in range(len(columns))]
    return "\n".join("  ".join(cell.rjust(width) for cell, width in zip(line, widths)) for line in cells)


def write_csv(rows: Sequence[EvalRow], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=EvalRow.csv_columns(), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row.csv_values())


def read_csv(path: Union[str, Path]) -> List[EvalRow]:
    """Rows of a metrics CSV written by :func:`write_csv`."""
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        missing = set(EvalRow.csv_columns()) - set(reader.fieldnames or [])
        if missing:
            raise EvaluationError(f"{path}: missing columns {sorted(missing)}")
        return [EvalRow.model_validate(row) for row in reader]
