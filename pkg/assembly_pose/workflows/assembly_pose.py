"""Assembly pose estimation as a node graph.

segment -> project_target -> place_source -> register -> chain_pose

The base pose comes from registering a ray-cast render of the base mesh (placed
by translation at the observed centroid) onto the observed base points:
T_w_b = T_s_b * T_w_s. The assembly pose then follows from the plan's relative
pose: T_w_a = T_w_b * T_b_a.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Tuple

import numpy as np

from assembly_pose.dataset import AssemblyPlan, SceneRecord
from assembly_pose.engine import ExecutionEntry, Graph, first_error
from assembly_pose.geometry import RigidTransform, compose, mesh_diameter
from assembly_pose.raycast import LabelImage, depth_to_cloud, render_source_cloud
from assembly_pose.registration import RegistrationResult, register
from assembly_pose.schemas import EstimateLine, FailureLine, RegistrationParams, TimingLine
from assembly_pose.segmentation import SegmentationProvider

logger = logging.getLogger(__name__)


class PipelineError(ValueError):
    """Raised when a record cannot be estimated."""


@dataclass(frozen=True, eq=False)
class AssemblyEstimate:
    """Estimated base and assembly poses for one record of one step."""
    step_index: int
    record_id: int
    T_w_b: RigidTransform
    T_w_a: RigidTransform
    registration: RegistrationResult
    elapsed: float
    log: Tuple[ExecutionEntry, ...] = field(default=(), repr=False)

    @property
    def flagged(self) -> bool:
        return self.registration.flagged

    def to_line(self) -> EstimateLine:
        return EstimateLine(step=self.step_index, record=self.record_id,
                            T_w_a=self.T_w_a.matrix.tolist(), T_w_b=self.T_w_b.matrix.tolist(),
                            fitness=self.registration.fitness, inlier_rmse=self.registration.inlier_rmse,
                            flagged=self.flagged)

    def timing_line(self) -> TimingLine:
        return TimingLine(step=self.step_index, record=self.record_id, elapsed=self.elapsed)


@dataclass
class BatchResult:
    estimates: List[AssemblyEstimate] = field(default_factory=list)
    failures: List[FailureLine] = field(default_factory=list)


# ============================================================================
# Nodes
# ============================================================================

def segment(state: Dict[str, Any]) -> Dict[str, Any]:
    """Label the record and keep only the base object's ids."""
    record: SceneRecord = state["record"]
    labels: LabelImage = state["segmenter"](record)
    if labels.values.shape != record.depth.values.shape:
        raise PipelineError(f"segmentation is {labels.width}x{labels.height}, "
                            f"depth is {record.depth.width}x{record.depth.height}")
    base_ids = state["step"].base_ids
    base = np.isin(labels.values, base_ids)
    if not base.any():
        raise PipelineError("base object not visible")
    state["mask"] = LabelImage(np.where(base, labels.values, 0))
    return state


def project_target(state: Dict[str, Any]) -> Dict[str, Any]:
    """Back-project the masked depth to the observed base cloud."""
    record: SceneRecord = state["record"]
    state["target"] = depth_to_cloud(record.depth, record.camera, state["mask"], state["step"].base_ids)
    return state


def has_target(state: Dict[str, Any]) -> bool:
    """Enough observed points for a minimal registration sample."""
    return len(state["target"]) >= state["params"].ransac_sample_size


def place_source(state: Dict[str, Any]) -> Dict[str, Any]:
    """Render the base mesh at the target centroid from the record's camera."""
    source, placement = render_source_cloud(state["step"].base_mesh, state["target"], state["record"].camera)
    state["source"] = source
    state["T_w_s"] = placement
    return state


def register_clouds(state: Dict[str, Any]) -> Dict[str, Any]:
    """Register the rendered source onto the observed target (T_s_b)."""
    viewpoint = state["record"].camera.pose.translation
    state["registration"] = register(state["source"], state["target"], state["params"], viewpoint)
    return state


def chain_pose(state: Dict[str, Any]) -> Dict[str, Any]:
    """T_w_b = T_s_b * T_w_s, then T_w_a = T_w_b * T_b_a."""
    registration: RegistrationResult = state["registration"]
    state["T_w_b"] = compose(registration.transform, state["T_w_s"])
    state["T_w_a"] = compose(state["T_w_b"], state["step"].relative_pose)
    return state


def build_pipeline_graph() -> Graph:
    graph = Graph("assembly_pose")
    graph.add_node("segment", segment)
    graph.add_node("project_target", project_target)
    graph.add_node("place_source", place_source)
    graph.add_node("register", register_clouds)
    graph.add_node("chain_pose", chain_pose)
    graph.add_edge("segment", "project_target")
    graph.add_edge("project_target", "place_source", condition=has_target)
    graph.add_edge("place_source", "register")
    graph.add_edge("register", "chain_pose")
    return graph


# ============================================================================
# Drivers
# ============================================================================

def step_params(plan: AssemblyPlan, step_index: int, params: RegistrationParams) -> RegistrationParams:
    """Params with a relative distance threshold resolved against the step's base mesh."""
    if params.distance_mode == "absolute":
        return params
    return params.resolved(mesh_diameter(plan.step(step_index).base_mesh))


def estimate_step(record: SceneRecord, plan: AssemblyPlan, step: int, seg: SegmentationProvider,
                  params: RegistrationParams) -> AssemblyEstimate:
    """Estimate the assembly pose of ``step`` from one record.

    Raises:
        PipelineError: If the base object is not visible or too few of its points are
        ValueError: Any error raised by a pipeline stage
    """
    state = {
        "record": record,
        "step": plan.step(step),
        "segmenter": seg,
        "params": step_params(plan, step, params),
    }
    started = time.perf_counter()
    state, execution_log = build_pipeline_graph().execute(state)
    elapsed = time.perf_counter() - started

    failed = first_error(execution_log)
    if failed is not None:
        raise failed.error
    if "T_w_a" not in state:
        raise PipelineError(f"too few target points ({len(state['target'])})")

    registration: RegistrationResult = state["registration"]
    logger.debug("step %d record %d: fitness %.4f rmse %.6f in %.2fs", step, record.image_id,
                 registration.fitness, registration.inlier_rmse, elapsed)
    return AssemblyEstimate(step, record.image_id, state["T_w_b"], state["T_w_a"], registration,
                            elapsed, tuple(execution_log))


def estimate_sequence(records: Iterable[SceneRecord], plan: AssemblyPlan, seg: SegmentationProvider,
                      params: RegistrationParams, threads: int = 1) -> BatchResult:
    """Estimate every record independently; failing records are collected, not raised.

    Output order follows the input order regardless of ``threads``.
    """
    records = list(records)

    def run(record: SceneRecord):
        try:
            return estimate_step(record, plan, record.step_index, seg, params)
        except Exception as exc:
            return FailureLine(step=record.step_index, record=record.image_id, error=str(exc) or type(exc).__name__)

    with ThreadPoolExecutor(max_workers=threads) as executor:
        outcomes = list(executor.map(run, records))

    batch = BatchResult()
    current_step = None
    for outcome in outcomes:
        if isinstance(outcome, FailureLine):
            logger.warning("step %d record %d failed: %s", outcome.step, outcome.record, outcome.error)
            batch.failures.append(outcome)
            continue
        if outcome.step_index != current_step:
            current_step = outcome.step_index
            logger.info("step %d: results", current_step)
        if outcome.flagged:
            logger.warning("step %d record %d: registration flagged (fitness %.4f)",
                           outcome.step_index, outcome.record_id, outcome.registration.fitness)
        batch.estimates.append(outcome)
    logger.info("estimated %d records, %d failures", len(batch.estimates), len(batch.failures))
    return batch
