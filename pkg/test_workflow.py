"""Tests for the graph engine, segmentation registry and the assembly pose pipeline."""

import logging
import math
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

sys.path.insert(0, str(Path(__file__).resolve().parent))

from assembly_pose.dataset import AssemblyPlan, HemisphereSampling, SceneRecord, hemisphere_poses
from assembly_pose.engine import Graph, NodeStatus, first_error
from assembly_pose.geometry import RigidTransform, centroid, compose, invert, sample_mesh_surface
from assembly_pose.metrics import adi
from assembly_pose.raycast import CameraModel, LabelImage, raycast_scene
from assembly_pose.registration import RegistrationResult
from assembly_pose.schemas import CameraIntrinsics, PlanConfig, RegistrationParams
from assembly_pose.segmentation import SegmentationRegistry, segmentation_registry
from assembly_pose.workflows import assembly_pose as pipeline
from assembly_pose.workflows.assembly_pose import PipelineError, estimate_sequence, estimate_step


def matrix(rotation: np.ndarray, translation) -> list:
    m = np.eye(4)
    m[:3, :3] = rotation
    m[:3, 3] = translation
    return m.reshape(-1).tolist()


def make_plan(base_yaw_degrees: float = 0.0) -> AssemblyPlan:
    yaw = Rotation.from_euler("z", base_yaw_degrees, degrees=True).as_matrix()
    payload = {
        "name": "tower",
        "base_pose": matrix(yaw, [0.0, 0.0, 0.0075]),
        "objects": [
            {"id": 1, "name": "plate", "primitive": {"type": "box", "extents": [0.06, 0.05, 0.015]}},
            {"id": 2, "name": "peg", "primitive": {"type": "cylinder", "radius": 0.012, "height": 0.03}},
            {"id": 3, "name": "cube", "primitive": {"type": "box", "extents": [0.02, 0.02, 0.02]}},
        ],
        "steps": [
            {"assembly_object": 2, "relative_pose": matrix(np.eye(3), [-0.014, 0.0, 0.0225])},
            {"assembly_object": 3, "relative_pose": matrix(np.eye(3), [0.016, 0.008, 0.0175])},
        ],
    }
    return AssemblyPlan.from_config(PlanConfig.model_validate(payload))


def render_record(plan: AssemblyPlan, step_index: int, image_id: int = 0, yaw: float = 0.3,
                  intrinsics: CameraIntrinsics = None) -> SceneRecord:
    intrinsics = intrinsics or CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=48.0, width=128, height=96)
    sampling = HemisphereSampling((yaw,), (0.9,), (0.25,), (0.0, 0.0, 0.02))
    camera = CameraModel.from_intrinsics(intrinsics, hemisphere_poses(sampling)[0])
    step = plan.step(step_index)
    poses = {i: plan.world_pose(i) for i in step.base_ids + (step.assembly_id,)}
    depth, labels = raycast_scene([(plan.objects[i].mesh, poses[i], i) for i in step.base_ids], camera)
    return SceneRecord(depth, labels, camera, poses, step_index, image_id, step.assembly_id)


def oracle_register(plan: AssemblyPlan, step_index: int):
    """A register() stand-in returning the exact source-to-base transform."""
    step = plan.step(step_index)

    def fake(source, target, params, viewpoint=(0.0, 0.0, 0.0)):
        placement = RigidTransform.from_translation(centroid(target) - step.base_mesh.vertex_centroid())
        transform = compose(plan.base_pose, invert(placement))
        return RegistrationResult(transform, 1.0, 0.0, len(source))
    return fake


def ground_truth(record: SceneRecord) -> LabelImage:
    return segmentation_registry.get("ground_truth")(record)


# ============================================================================
# Engine
# ============================================================================

def add(key: str, amount: int):
    def node(state):
        state[key] = state.get(key, 0) + amount
        return state
    return node


def test_graph_runs_nodes_in_order():
    graph = Graph("linear")
    graph.add_node("a", add("x", 1))
    graph.add_node("b", add("x", 10))
    graph.add_node("c", add("y", 5))
    graph.add_edge("a", "b")
    graph.add_edge("b", "c")
    state, log = graph.execute({"x": 0})
    assert state == {"x": 11, "y": 5}
    assert [entry.node_name for entry in log] == ["a", "b", "c"]
    assert all(entry.status is NodeStatus.SUCCESS for entry in log)
    assert first_error(log) is None


def test_graph_conditional_edge():
    graph = Graph("branch")
    graph.add_node("a", add("x", 1))
    graph.add_node("b", add("x", 10))
    graph.add_edge("a", "b", condition=lambda state: state["x"] > 5)
    state, log = graph.execute({"x": 0})
    assert state["x"] == 1 and len(log) == 1
    state, log = graph.execute({"x": 5})
    assert state["x"] == 16 and len(log) == 2


def test_graph_error_halts_the_run():
    def boom(state):
        raise RuntimeError("broken stage")

    graph = Graph("failing")
    graph.add_node("a", add("x", 1))
    graph.add_node("boom", boom)
    graph.add_node("c", add("x", 100))
    graph.add_edge("a", "boom")
    graph.add_edge("boom", "c")
    state, log = graph.execute({"x": 0})
    assert state["x"] == 1
    failed = first_error(log)
    assert failed.node_name == "boom"
    assert isinstance(failed.error, RuntimeError)
    assert failed.error_message == "broken stage"
    assert [entry.node_name for entry in log] == ["a", "boom"]


def test_graph_rejects_unknown_nodes():
    graph = Graph("g")
    graph.add_node("a", add("x", 1))
    with pytest.raises(ValueError, match="unknown stage"):
        graph.add_edge("a", "missing")


# ============================================================================
# Segmentation registry
# ============================================================================

def test_registry_lookup():
    registry = SegmentationRegistry()

    @registry.register("blank")
    def blank(record):
        return LabelImage(np.zeros_like(record.labels.values))

    assert registry.names() == ["blank"]
    assert registry.get("blank") is blank
    with pytest.raises(ValueError, match="available: blank"):
        registry.get("learned")
    assert "ground_truth" in segmentation_registry.names()


def test_ground_truth_provider_returns_record_labels():
    record = render_record(make_plan(), 1)
    assert ground_truth(record) is record.labels


# ============================================================================
# Pipeline
# ============================================================================

def test_invisible_base_raises():
    plan = make_plan()
    record = render_record(plan, 1)
    blank = lambda r: LabelImage(np.zeros_like(r.labels.values))
    with pytest.raises(PipelineError, match="base object not visible"):
        estimate_step(record, plan, 1, blank, RegistrationParams())


def test_too_few_target_points_raises():
    plan = make_plan()
    record = render_record(plan, 1)
    v, u = np.argwhere(record.labels.values == 1)[0]

    def single_pixel(r):
        values = np.zeros_like(r.labels.values)
        values[v, u] = 1
        return LabelImage(values)

    with pytest.raises(PipelineError, match="too few target points"):
        estimate_step(record, plan, 1, single_pixel, RegistrationParams())


def test_segmentation_size_mismatch_raises():
    plan = make_plan()
    record = render_record(plan, 1)
    with pytest.raises(PipelineError, match="segmentation is"):
        estimate_step(record, plan, 1, lambda r: LabelImage(np.ones((4, 4))), RegistrationParams())


def test_pose_chain_with_exact_registration(monkeypatch):
    plan = make_plan(base_yaw_degrees=15.0)
    monkeypatch.setattr(pipeline, "register", oracle_register(plan, 2))
    record = render_record(plan, 2)
    estimate = estimate_step(record, plan, 2, ground_truth, RegistrationParams())

    assert np.allclose(estimate.T_w_b.matrix, plan.base_pose.matrix, atol=1e-12)
    assert np.allclose(estimate.T_w_a.matrix, plan.world_pose(3).matrix, atol=1e-12)
    chained = compose(estimate.T_w_b, plan.step(2).relative_pose)
    assert np.array_equal(estimate.T_w_a.matrix, chained.matrix)
    assert [entry.node_name for entry in estimate.log] == \
        ["segment", "project_target", "place_source", "register", "chain_pose"]

    line = estimate.to_line()
    assert (line.step, line.record, line.flagged) == (2, 0, False)
    assert np.allclose(line.T_w_a, plan.world_pose(3).matrix, atol=1e-12)
    assert estimate.timing_line().elapsed >= 0.0


def test_relative_threshold_uses_base_diameter():
    plan = make_plan()
    params = RegistrationParams(distance_mode="relative", relative_distance_factor=0.1)
    resolved = pipeline.step_params(plan, 1, params)
    assert resolved.distance_mode == "absolute"
    assert resolved.distance_threshold == pytest.approx(0.1 * math.sqrt(0.06 ** 2 + 0.05 ** 2 + 0.015 ** 2))
    assert pipeline.step_params(plan, 1, RegistrationParams()) == RegistrationParams()


def test_sequence_collects_failures_in_order(monkeypatch):
    plan = make_plan()
    monkeypatch.setattr(pipeline, "register", oracle_register(plan, 1))
    records = [render_record(plan, 1, image_id=i, yaw=0.3 + i) for i in range(4)]

    def flaky(record):
        if record.image_id == 2:
            return LabelImage(np.zeros_like(record.labels.values))
        return record.labels

    single = estimate_sequence(records, plan, flaky, RegistrationParams(), threads=1)
    pooled = estimate_sequence(records, plan, flaky, RegistrationParams(), threads=3)
    assert [e.record_id for e in single.estimates] == [0, 1, 3]
    assert [(f.step, f.record) for f in single.failures] == [(1, 2)]
    assert single.failures[0].error == "base object not visible"
    assert [e.record_id for e in pooled.estimates] == [0, 1, 3]
    for a, b in zip(single.estimates, pooled.estimates):
        assert np.array_equal(a.T_w_a.matrix, b.T_w_a.matrix)


def test_sequence_logs_each_step_after_its_results(monkeypatch, caplog):
    plan = make_plan()
    monkeypatch.setattr(pipeline, "register", oracle_register(plan, 1))
    records = [render_record(plan, 1, image_id=i, yaw=0.3 + i) for i in range(2)]
    with caplog.at_level(logging.INFO, logger=pipeline.__name__):
        estimate_sequence(records, plan, ground_truth, RegistrationParams(), threads=2)
    messages = [r.getMessage() for r in caplog.records if r.name == pipeline.__name__]
    assert messages == ["step 1: results", "estimated 2 records, 0 failures"]


def test_pipeline_estimates_assembly_pose_on_rendered_record():
    plan = make_plan(base_yaw_degrees=15.0)
    intrinsics = CameraIntrinsics(fx=307.5, fy=307.5, cx=160.0, cy=120.0, width=320, height=240)
    record = render_record(plan, 2, intrinsics=intrinsics)
    params = RegistrationParams(distance_threshold=0.004, voxel_size=0.0015)
    estimate = estimate_step(record, plan, 2, ground_truth, params)

    model = sample_mesh_surface(plan.objects[3].mesh, 5000, seed=0)
    assert not estimate.flagged
    assert estimate.registration.fitness > 0.5
    assert adi(plan.world_pose(3), estimate.T_w_a, model) <= 0.002


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
