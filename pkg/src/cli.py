import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .formats import document_from_report, dump_plan, load_json, load_plan, load_scene, load_task, report_to_dict
from .logger import setup_logger
from .planner import plan
from .render import write_svgs
from .replay import check_plan, format_violations
from .scene import SceneError

logger = logging.getLogger(__name__)

EXIT_FEASIBLE = 0
EXIT_INPUT_ERROR = 1
EXIT_INFEASIBLE = 2

BENCH_COLUMNS = ["task", "run", "feasible", "wp_count", "rrt_s", "cp_s", "komo_s", "restarts"]
BENCH_METRICS = ["wp_count", "rrt_s", "cp_s", "komo_s"]


def _input_error(message):
    print(f"input error: {message}", file=sys.stderr)
    return EXIT_INPUT_ERROR


def _load_problem(scene_path, task_path):
    loaded, error_message = load_scene(scene_path)
    if error_message:
        return None, error_message
    scene, config = loaded
    spec, error_message = load_task(task_path, scene)
    if error_message:
        return None, error_message
    return (scene, config, spec), None


def _write_json(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_plan(args):
    loaded, error_message = _load_problem(args.scene, args.task)
    if error_message:
        return _input_error(error_message)
    scene, config, spec = loaded
    planner_config = spec.planner_config
    if args.seed is not None:
        planner_config = replace(planner_config, seed=args.seed)

    report = plan(scene, spec.task, config, planner_config)
    doc = document_from_report(report, scene, spec.task, planner_config, args.record_timings)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(dump_plan(doc))
    if args.svg:
        write_svgs(scene, doc, args.svg)
    if args.report:
        _write_json(args.report, report_to_dict(report))

    if not report.feasible:
        print(f"plan infeasible: {report.reason}", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(
        f"plan feasible: {len(doc.states)} states, {len(doc.waypoints)} waypoints, "
        f"{len(doc.contacts)} contacts, {report.metrics.restarts} restarts"
    )
    return EXIT_FEASIBLE


def cmd_replay(args):
    loaded, error_message = load_scene(args.scene)
    if error_message:
        return _input_error(error_message)
    scene, _ = loaded
    doc, error_message = load_plan(args.plan)
    if error_message:
        return _input_error(error_message)
    try:
        violations = check_plan(scene, doc)
    except SceneError as e:
        return _input_error(f"plan does not match scene: {e}")

    if not args.check:
        status = "feasible" if doc.feasible else "infeasible"
        print(f"{doc.target}: {status} plan with {len(doc.states)} states and {len(doc.switches)} switches")
        return EXIT_FEASIBLE
    print(format_violations(violations))
    return EXIT_FEASIBLE if not violations else EXIT_INFEASIBLE


def validate_suite(data, base_dir):
    """
    Validates a benchmark suite listing scene/task pairs.

    Returns:
        tuple: (list of (name, scene_path, task_path), None) if valid, (None, error_message) otherwise.
    """
    if not isinstance(data, dict) or not isinstance(data.get("tasks"), list):
        return None, "Suite must be an object with a 'tasks' list"
    if not data["tasks"]:
        return None, "Suite lists no tasks"
    entries = []
    for entry in data["tasks"]:
        if not isinstance(entry, dict) or "scene" not in entry or "task" not in entry:
            return None, "Suite entries need 'scene' and 'task' paths"
        scene_path = os.path.join(base_dir, entry["scene"])
        task_path = os.path.join(base_dir, entry["task"])
        name = entry.get("name", os.path.splitext(os.path.basename(task_path))[0])
        entries.append((name, scene_path, task_path))
    return entries, None


def _metric(value):
    return "" if value is None else value


def cmd_bench(args):
    data, error_message = load_json(args.suite)
    if error_message:
        return _input_error(error_message)
    entries, error_message = validate_suite(data, os.path.dirname(os.path.abspath(args.suite)))
    if error_message:
        return _input_error(error_message)
    if args.runs < 1:
        return _input_error("--runs must be at least 1")

    for name, scene_path, task_path in entries:
        _, error_message = _load_problem(scene_path, task_path)
        if error_message:
            return _input_error(f"{name}: {error_message}")

    rows = []
    for name, scene_path, task_path in sorted(entries):
        for run in range(args.runs):
            # task files are reloaded so file samplers restart their candidate cycle
            (scene, config, spec), _ = _load_problem(scene_path, task_path)
            planner_config = replace(spec.planner_config, seed=args.seed + run)
            report = plan(scene, spec.task, config, planner_config)
            metrics = report_to_dict(report)
            rows.append({
                "task": name,
                "run": run,
                "feasible": int(report.feasible),
                "wp_count": metrics["wp_count"],
                "rrt_s": metrics["rrt_s"],
                "cp_s": metrics["cp_s"],
                "komo_s": metrics["komo_s"],
                "restarts": metrics["restarts"],
            })
            logger.info("Bench run finished", extra={"task": name, "run": run, "feasible": report.feasible})

    with open(args.csv, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _metric(v) for k, v in row.items()})

    for name in sorted({row["task"] for row in rows}):
        task_rows = [row for row in rows if row["task"] == name]
        solved = sum(row["feasible"] for row in task_rows)
        summary = ", ".join(
            f"{key} {np.mean([r[key] for r in task_rows]):.3f} ± {np.std([r[key] for r in task_rows]):.3f}"
            for key in BENCH_METRICS
        )
        print(f"{name}: {solved}/{len(task_rows)} feasible, {summary}")
    return EXIT_FEASIBLE


def build_parser():
    parser = argparse.ArgumentParser(prog="hmap", description="Planar sequential manipulation planner")
    parser.add_argument("--verbose", action="store_true", help="Log at debug level")
    subparsers = parser.add_subparsers(dest="command", required=True)

    plan_parser = subparsers.add_parser("plan", help="Plan one task")
    plan_parser.add_argument("--scene", required=True)
    plan_parser.add_argument("--task", required=True)
    plan_parser.add_argument("--seed", type=int, default=None)
    plan_parser.add_argument("--out", required=True)
    plan_parser.add_argument("--svg", default=None, help="Directory for per-step frames and overview.svg")
    plan_parser.add_argument("--report", default=None, help="Metrics report with timings")
    plan_parser.add_argument("--record-timings", action="store_true", help="Keep wall-clock timings in the plan file")
    plan_parser.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)
    plan_parser.set_defaults(handler=cmd_plan)

    replay_parser = subparsers.add_parser("replay", help="Replay and check a plan file")
    replay_parser.add_argument("--plan", required=True)
    replay_parser.add_argument("--scene", required=True)
    replay_parser.add_argument("--check", action="store_true")
    replay_parser.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)
    replay_parser.set_defaults(handler=cmd_replay)

    bench_parser = subparsers.add_parser("bench", help="Run a task suite several times")
    bench_parser.add_argument("--suite", required=True)
    bench_parser.add_argument("--runs", type=int, default=10)
    bench_parser.add_argument("--seed", type=int, default=0)
    bench_parser.add_argument("--csv", required=True)
    bench_parser.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)
    bench_parser.set_defaults(handler=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logger("debug" if args.verbose else None)
    try:
        return args.handler(args)
    except OSError as e:
        return _input_error(f"{e.filename}: {e.strerror}")


if __name__ == "__main__":
    sys.exit(main())
