"""Command-line entry point: gen, estimate, eval and report.

Logs go to stderr, data to files, and one machine-parsable summary line of
``key=value`` pairs to stdout. Exit codes: 0 success, 1 usage error, 2 data
error, 3 internal error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, ValidationError

from assembly_pose import __version__
from assembly_pose.dataset import (
    AssemblyPlan,
    DatasetError,
    HemisphereSampling,
    generate_dataset,
    load_step,
    read_dataset_info,
)
from assembly_pose.geometry import RigidTransform
from assembly_pose.metrics import (
    GroundTruth,
    build_models,
    evaluate_estimates,
    format_table,
    read_csv,
    write_csv,
)
from assembly_pose.overlay import render_overlay
from assembly_pose.schemas import EstimateLine, FailureLine, RegistrationParams, RunConfig, TimingLine
from assembly_pose.segmentation import segmentation_registry
from assembly_pose.workflows.assembly_pose import estimate_sequence

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

ESTIMATES_FILE = "estimates.jsonl"
TIMING_FILE = "estimates.timing.jsonl"
FAILURES_FILE = "failures.jsonl"
METRICS_FILE = "metrics.csv"
OVERLAY_DIR = "overlays"

VIEW_KEYS = {"yaw": "yaw_count", "pitch": "pitch_count", "scale": "scale_count"}


class UsageError(Exception):
    """Raised for malformed command lines."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def parse_views(text: str) -> Dict[str, int]:
    """Parse ``yaw:N,pitch:N,scale:N`` (any subset) into sampling counts."""
    views = {}
    for part in text.split(","):
        key, _, value = part.strip().partition(":")
        if key not in VIEW_KEYS or not value.isdigit() or int(value) < 1:
            raise UsageError(f"invalid --views entry '{part}' (expected yaw:N,pitch:N,scale:N)")
        views[key] = int(value)
    return views


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="assembly-pose", description="6D assembly pose estimation from depth images")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--plan", type=Path, help="Assembly plan YAML")
    common.add_argument("--dataset", type=Path, help="Dataset directory")
    common.add_argument("--params", type=Path, help="Registration params YAML")
    common.add_argument("--seed", type=int, default=None, help="Overrides the params/sampling seed")
    common.add_argument("--out", type=Path, help="Output directory")
    common.add_argument("--overlay", action="store_true", help="Write bounding-box overlays (eval)")
    common.add_argument("--views", type=str, default=None, help="yaw:N,pitch:N,scale:N (gen)")
    common.add_argument("--threads", type=int, default=1, help="Worker threads")
    common.add_argument("--segmenter", default="ground_truth",
                        help=f"Segmentation provider ({', '.join(segmentation_registry.names())})")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    commands.add_parser("gen", parents=[common], help="Generate a dataset")
    commands.add_parser("estimate", parents=[common], help="Estimate assembly poses")
    commands.add_parser("eval", parents=[common], help="Evaluate estimates")
    commands.add_parser("report", parents=[common], help="Print a metrics table")
    return parser


def parse_config(argv: Optional[Sequence[str]] = None) -> Tuple[RunConfig, bool]:
    """Parse and validate a command line; returns (config, verbose)."""
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig(
            command=args.command,
            plan_path=args.plan,
            dataset_path=args.dataset,
            params_path=args.params,
            seed=args.seed,
            output_path=args.out,
            overlay=args.overlay,
            views=parse_views(args.views) if args.views else None,
            threads=args.threads,
            segmenter=args.segmenter,
        )
    except ValidationError as exc:
        raise UsageError("; ".join(error["msg"] for error in exc.errors())) from exc
    return config, args.verbose


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def summary_line(**fields) -> str:
    return " ".join(f"{key}={value}" for key, value in fields.items())


def load_params(config: RunConfig) -> RegistrationParams:
    """Params from the file (defaults when missing), with the CLI seed applied."""
    if config.params_path is not None and config.params_path.is_file():
        params = RegistrationParams.from_file(config.params_path)
    else:
        if config.params_path is not None:
            logger.info("params file %s not found, using defaults", config.params_path)
        params = RegistrationParams()
    if config.seed is not None:
        params = params.model_copy(update={"seed": config.seed})
    return params


def _write_jsonl(path: Path, lines: Sequence[BaseModel]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for line in lines:
            handle.write(json.dumps(line.model_dump(), sort_keys=True) + "\n")


def _read_jsonl(path: Path, model: type) -> List:
    if not path.is_file():
        raise DatasetError(f"{path}: file not found")
    with open(path, "r", encoding="utf-8") as handle:
        return [model.model_validate_json(text) for text in handle if text.strip()]


# ============================================================================
# Commands
# ============================================================================

def cmd_gen(config: RunConfig) -> int:
    plan = AssemblyPlan.from_file(config.plan_path)
    sampling_config = plan.sampling
    if config.views:
        sampling_config = sampling_config.model_copy(
            update={VIEW_KEYS[key]: count for key, count in config.views.items()})
    sampling = HemisphereSampling.from_config(sampling_config, plan.assembled_mesh().vertex_centroid())
    seed = config.seed if config.seed is not None else 0

    summary = generate_dataset(plan, sampling, config.dataset_path, seed=seed, threads=config.threads)
    logger.info("%d records in %d steps written to %s", summary.total_records, len(summary.steps),
                config.dataset_path)
    per_step = {f"step_{s.step:02d}": s.records for s in summary.steps}
    print(summary_line(command="gen", records=summary.total_records, steps=len(summary.steps), **per_step,
                       dataset=config.dataset_path))
    return EXIT_OK


def cmd_estimate(config: RunConfig) -> int:
    plan = AssemblyPlan.from_file(config.plan_path)
    params = load_params(config)
    segmenter = segmentation_registry.get(config.segmenter)
    info = read_dataset_info(config.dataset_path)

    estimates, failures, records = [], [], 0
    for step_info in info.steps:
        step = plan.step(step_info.step)
        if list(step.base_ids) != step_info.base_ids or step.assembly_id != step_info.assembly_object:
            raise DatasetError(f"dataset step {step_info.step} does not match plan '{plan.name}'")
        logger.info("step %d: %d records", step_info.step, step_info.records)
        batch = estimate_sequence(load_step(config.dataset_path, step_info), plan, segmenter, params,
                                  threads=config.threads)
        records += step_info.records
        estimates.extend(batch.estimates)
        failures.extend(batch.failures)

    out = config.output_path
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / ESTIMATES_FILE, [e.to_line() for e in estimates])
    _write_jsonl(out / TIMING_FILE, [e.timing_line() for e in estimates])
    _write_jsonl(out / FAILURES_FILE, failures)

    flagged = sum(1 for e in estimates if e.flagged)
    print(summary_line(command="estimate", records=records, estimates=len(estimates), failures=len(failures),
                       flagged=flagged, out=out))
    if records and not estimates:
        logger.error("every record failed")
        return EXIT_DATA
    return EXIT_OK


def cmd_eval(config: RunConfig) -> int:
    plan = AssemblyPlan.from_file(config.plan_path)
    out = config.output_path
    lines: List[EstimateLine] = _read_jsonl(out / ESTIMATES_FILE, EstimateLine)
    timings = {(t.step, t.record): t.elapsed for t in _read_jsonl(out / TIMING_FILE, TimingLine)} \
        if (out / TIMING_FILE).is_file() else {}
    failures = _read_jsonl(out / FAILURES_FILE, FailureLine) if (out / FAILURES_FILE).is_file() else []
    by_key = {(line.step, line.record): line for line in lines}

    ground_truth: GroundTruth = {}
    overlays = 0
    for step_info in read_dataset_info(config.dataset_path).steps:
        box = plan.step(step_info.step).assembly_mesh.bounds()
        for record in load_step(config.dataset_path, step_info):
            key = (record.step_index, record.image_id)
            ground_truth[key] = (record.assembly_object_id, record.assembly_pose)
            if config.overlay and key in by_key:
                path = out / OVERLAY_DIR / f"step_{record.step_index:02d}" / f"{record.image_id:06d}.png"
                render_overlay(record.depth, record.camera, box, record.assembly_pose,
                               RigidTransform.from_matrix(by_key[key].T_w_a), path)
                overlays += 1

    models = build_models(plan, seed=config.seed if config.seed is not None else 0)
    rows = evaluate_estimates(lines, ground_truth, plan, models, timings, failures)
    write_csv(rows, out / METRICS_FILE)
    print(format_table(rows))
    print(summary_line(command="eval", steps=len(rows), estimates=len(lines),
                       failures=sum(row.failures for row in rows), overlays=overlays,
                       csv=out / METRICS_FILE))
    return EXIT_OK


def cmd_report(config: RunConfig) -> int:
    path = config.output_path
    if path.is_dir():
        path = path / METRICS_FILE
    rows = read_csv(path)
    print(format_table(rows))
    print(summary_line(command="report", steps=len(rows), csv=path))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "gen": cmd_gen,
    "estimate": cmd_estimate,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        config, verbose = parse_config(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    configure_logging(verbose)

    try:
        return COMMANDS[config.command](config)
    except (ValueError, OSError, yaml.YAMLError) as exc:
        logger.error("%s failed: %s", config.command, exc)
        return EXIT_DATA
    except Exception:
        logger.exception("%s: internal error", config.command)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
