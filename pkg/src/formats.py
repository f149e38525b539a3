import json
import logging
import os
from dataclasses import dataclass, field, fields
from typing import List, Optional

from .contact import SAMPLERS, file_sampler
from .geometry import Box, Circle, ConvexPolygon, InvalidShapeError, Pose2
from .optimizer import SolverSettings
from .planner import DEFAULT_SKELETON, PlannerConfig, Task
from .predicates import SkeletonError, parse_skeleton
from .scene import AttachmentEvent, Configuration, Frame, FrameKind, Joint, Scene, SceneError
from .waypoints import RrtSettings

logger = logging.getLogger(__name__)

PLAN_FORMAT = "hmap-plan/1"

PLANNER_KEYS = {
    "tau_pos", "tau_ang", "spacing", "j_max", "spacing_floor", "steps_per_phase",
    "manipulator_order", "reuse_contact", "seed", "time_budget", "max_contact_attempts",
    "margin", "constrain_orientation",
}
RRT_KEYS = {f.name for f in fields(RrtSettings)}
SOLVER_KEYS = {f.name for f in fields(SolverSettings)}


def _pose(values, what):
    if not isinstance(values, (list, tuple)) or len(values) != 3:
        raise ValueError(f"{what} must be [x, y, theta]")
    return Pose2(*(float(v) for v in values))


def _shape(spec, frame_id):
    if spec is None:
        return None
    kind = spec.get("type")
    if kind == "circle":
        return Circle(float(spec["radius"]))
    if kind == "box":
        return Box(tuple(float(v) for v in spec["half_extents"]))
    if kind == "polygon":
        return ConvexPolygon(tuple(tuple(float(c) for c in v) for v in spec["vertices"]))
    raise ValueError(f"frame '{frame_id}' has unknown shape type '{kind}'")


def shape_to_dict(shape):
    if shape is None:
        return None
    if isinstance(shape, Circle):
        return {"type": "circle", "radius": shape.radius}
    if isinstance(shape, Box):
        return {"type": "box", "half_extents": list(shape.half_extents)}
    return {"type": "polygon", "vertices": [list(v) for v in shape.vertices_ccw]}


def validate_scene(data):
    """
    Validates scene file data and builds the scene with its start configuration.

    Args:
        data (dict): Parsed scene file.

    Returns:
        tuple: ((Scene, Configuration), None) if valid, (None, error_message) otherwise.
    """
    if not isinstance(data, dict):
        return None, "Scene must be a JSON object"
    if not isinstance(data.get("frames"), list) or not data["frames"]:
        return None, "Scene must list its frames"
    try:
        frames = []
        for entry in data["frames"]:
            frame_id = entry["id"]
            joint = entry.get("joint")
            frames.append(Frame(
                id=frame_id,
                parent=entry.get("parent"),
                rel_pose=_pose(entry.get("rel_pose", [0.0, 0.0, 0.0]), f"rel_pose of '{frame_id}'"),
                shape=_shape(entry.get("shape"), frame_id),
                kind=FrameKind(entry.get("kind", "static")),
                joint=Joint(tuple(float(v) for v in joint["limits"])) if joint else None,
                layer=entry.get("layer", "all"),
            ))
        bounds = data.get("bounds", [-1.5, -1.5, 1.5, 1.5])
        if len(bounds) != 4 or not (bounds[0] < bounds[2] and bounds[1] < bounds[3]):
            return None, f"Invalid workspace bounds {bounds}"
        scene = Scene(frames, bounds, data.get("arms"))
        config = scene.default_configuration()
        q = data.get("init", {}).get("q")
        if q is not None:
            if len(q) != scene.n_joints:
                return None, f"init.q has {len(q)} values, the scene has {scene.n_joints} joints"
            config = scene.clamp(config.with_joints(q))
    except KeyError as e:
        return None, f"Scene frame is missing field {e}"
    except (SceneError, InvalidShapeError, ValueError, TypeError) as e:
        return None, f"Invalid scene: {e}"
    return (scene, config), None


def scene_to_dict(scene, config):
    frames = []
    for frame in scene.frames.values():
        entry = {
            "id": frame.id,
            "parent": frame.parent,
            "kind": frame.kind.value,
            "rel_pose": frame.rel_pose.as_list(),
            "layer": frame.layer,
        }
        if frame.shape is not None:
            entry["shape"] = shape_to_dict(frame.shape)
        if frame.joint is not None:
            entry["joint"] = {"limits": list(frame.joint.limits)}
        frames.append(entry)
    return {"bounds": list(scene.bounds), "frames": frames, "arms": scene.arms, "init": {"q": list(config.q)}}


@dataclass
class TaskSpec:
    task: Task
    planner_config: PlannerConfig
    sampler: str = "heuristic"


def validate_task(data, scene, base_dir=None):
    """
    Validates task file data against a scene.

    Args:
        data (dict): Parsed task file.
        scene (Scene): The scene the task refers to.
        base_dir (str, optional): Directory relative sampler files resolve against.

    Returns:
        tuple: (TaskSpec, None) if valid, (None, error_message) otherwise.
    """
    if not isinstance(data, dict):
        return None, "Task must be a JSON object"
    for key in ("target", "goal"):
        if key not in data:
            return None, f"Task is missing '{key}'"
    try:
        goal = _pose(data["goal"], "goal")
        task = Task(
            target=data["target"],
            goal=goal,
            skeleton_template=tuple(data.get("skeleton", DEFAULT_SKELETON)),
            terminal_skeleton=tuple(data.get("terminal_skeleton", ())),
            tools=tuple(data.get("tools", ())),
            movable_obstacles=tuple(data.get("movable_obstacles", ())),
        )
        valid, error_message = task.validate(scene)
        if not valid:
            return None, f"Invalid task: {error_message}"
        parse_skeleton(
            list(task.skeleton_template) + list(task.terminal_skeleton), {"manip": "ee", "obj": task.target, "goal": goal}
        )

        overrides = dict(data.get("planner", {}))
        unknown = set(overrides) - PLANNER_KEYS - {"rrt", "solver"}
        if unknown:
            return None, f"Unknown planner settings {sorted(unknown)}"
        rrt = overrides.pop("rrt", {})
        solver = overrides.pop("solver", {})
        if set(rrt) - RRT_KEYS or set(solver) - SOLVER_KEYS:
            return None, f"Unknown rrt/solver settings {sorted((set(rrt) - RRT_KEYS) | (set(solver) - SOLVER_KEYS))}"
        if "goal_tolerance" in rrt:
            rrt["goal_tolerance"] = tuple(rrt["goal_tolerance"])
        if "bounds" in rrt and rrt["bounds"] is not None:
            rrt["bounds"] = tuple(rrt["bounds"])
        if "tolerance" in data:
            overrides["tau_pos"], overrides["tau_ang"] = (float(v) for v in data["tolerance"])
        if "manipulator_order" in overrides:
            overrides["manipulator_order"] = tuple(overrides["manipulator_order"])

        sampler_spec = data.get("sampler", "heuristic")
        if isinstance(sampler_spec, dict) and "file" in sampler_spec:
            path = sampler_spec["file"]
            if base_dir is not None and not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            sampler = file_sampler(path)
            sampler_name = f"file:{sampler_spec['file']}"
        elif sampler_spec in SAMPLERS:
            sampler = sampler_name = sampler_spec
        else:
            return None, f"Unknown sampler {sampler_spec!r}"

        planner_config = PlannerConfig(
            rrt=RrtSettings(**rrt), solver=SolverSettings(**solver), sampler=sampler, **overrides,
        )
        for manip_id in planner_config.manipulator_order:
            scene.frame(manip_id)
    except (SkeletonError, SceneError, ValueError, TypeError, OSError) as e:
        return None, f"Invalid task: {e}"
    return TaskSpec(task, planner_config, sampler_name), None


def load_json(path):
    """
    Reads a JSON file.

    Returns:
        tuple: (data, None) on success, (None, error_message) otherwise.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f), None
    except OSError as e:
        return None, f"Cannot read {path}: {e.strerror}"
    except json.JSONDecodeError as e:
        return None, f"Malformed JSON in {path}: {e}"


def load_scene(path):
    data, error_message = load_json(path)
    if error_message:
        return None, error_message
    return validate_scene(data)


def load_task(path, scene):
    data, error_message = load_json(path)
    if error_message:
        return None, error_message
    return validate_task(data, scene, os.path.dirname(os.path.abspath(path)))


@dataclass
class ContactEntry:
    waypoint: int
    object_id: str
    manipulator: Optional[str]
    local: List[float]
    world: List[float]
    normal: List[float]
    source: str
    u: float


@dataclass
class PlanDocument:
    """
    Serializable plan: recorded states, switches, contacts, waypoints and metrics.
    """
    feasible: bool
    target: str
    goal: Pose2
    tolerance: List[float]
    frame_ids: List[str]
    object_ids: List[str]
    states: List[Configuration]
    switches: list
    contacts: List[ContactEntry]
    waypoints: List[Pose2]
    spacing: Optional[float]
    metrics: dict
    sub_plans: list = field(default_factory=list)
    reason: Optional[str] = None


def _contact_entries(records):
    return [
        ContactEntry(
            waypoint=record.waypoint_index,
            object_id=record.contact.object_id,
            manipulator=record.contact.manipulator,
            local=[float(v) for v in record.contact.local],
            world=[float(v) for v in record.contact.world],
            normal=[float(v) for v in record.contact.outward_normal],
            source=record.contact.source,
            u=float(record.contact.u),
        )
        for record in records
    ]


def _metrics(metrics, record_timings):
    timing = (lambda v: round(float(v), 6)) if record_timings else (lambda v: None)
    return {
        "wp_count": metrics.wp_count,
        "rrt_s": timing(metrics.rrt_seconds),
        "cp_s": timing(metrics.cp_seconds),
        "komo_s": timing(metrics.komo_seconds),
        "restarts": metrics.restarts,
        "tool_used": metrics.tool_used,
        "obstacles_moved": list(metrics.obstacles_moved),
        "optimizer_calls": metrics.optimizer_calls,
    }


def _sub_plan_summary(report, target, record_timings):
    waypoints = report.waypoints
    return {
        "target": target,
        "feasible": report.feasible,
        "reason": report.reason,
        "contacts": [_contact_entry_dict(c) for c in _contact_entries(report.contacts)],
        "waypoints": [] if waypoints is None else [p.as_list() for p in waypoints],
        "metrics": _metrics(report.metrics, record_timings),
    }


def document_from_report(report, scene, task, planner_config, record_timings=False):
    """
    Builds the serializable plan from a planner report.

    Timing metrics are null unless record_timings is set, so that equal seeds give
    byte-identical plans.
    """
    waypoints = report.waypoints
    targets = list(report.metrics.obstacles_moved)
    return PlanDocument(
        feasible=report.feasible,
        target=task.target,
        goal=task.goal,
        tolerance=[planner_config.tau_pos, planner_config.tau_ang],
        frame_ids=list(scene.frames),
        object_ids=list(scene.object_ids),
        states=list(report.states),
        switches=list(report.switches),
        contacts=_contact_entries(report.contacts),
        waypoints=[] if waypoints is None else list(waypoints.waypoints),
        spacing=None if waypoints is None else waypoints.spacing,
        metrics=_metrics(report.metrics, record_timings),
        sub_plans=[
            _sub_plan_summary(sub, targets[i] if i < len(targets) else None, record_timings)
            for i, sub in enumerate(report.sub_plans)
        ],
        reason=report.reason,
    )


def _contact_entry_dict(entry):
    return {
        "waypoint": entry.waypoint,
        "object": entry.object_id,
        "manipulator": entry.manipulator,
        "local": entry.local,
        "world": entry.world,
        "normal": entry.normal,
        "source": entry.source,
        "u": entry.u,
    }


def plan_to_dict(doc):
    return {
        "format": PLAN_FORMAT,
        "feasible": doc.feasible,
        "reason": doc.reason,
        "target": doc.target,
        "goal": doc.goal.as_list(),
        "tolerance": list(doc.tolerance),
        "frames": list(doc.frame_ids),
        "states": [
            {
                "t": t,
                "q": [float(v) for v in state.q],
                "objects": {obj_id: state.object_poses[obj_id].as_list() for obj_id in doc.object_ids},
            }
            for t, state in enumerate(doc.states)
        ],
        "switches": [
            {
                "t": event.time_index,
                "type": event.type,
                "parent": event.parent_id,
                "child": event.child_id,
                "rel_pose": event.rel_pose.as_list(),
            }
            for event in doc.switches
        ],
        "contacts": [_contact_entry_dict(entry) for entry in doc.contacts],
        "waypoints": [pose.as_list() for pose in doc.waypoints],
        "spacing": doc.spacing,
        "metrics": dict(doc.metrics),
        "sub_plans": list(doc.sub_plans),
    }


def dump_plan(doc):
    return json.dumps(plan_to_dict(doc), indent=2, sort_keys=True) + "\n"


def validate_plan(data):
    """
    Validates plan file data.

    Returns:
        tuple: (PlanDocument, None) if valid, (None, error_message) otherwise.
    """
    if not isinstance(data, dict) or data.get("format") != PLAN_FORMAT:
        return None, f"Not a plan file (expected format '{PLAN_FORMAT}')"
    try:
        states = data["states"]
        object_ids = list(states[0]["objects"]) if states else []
        object_ids = sorted(object_ids, key=lambda o: list(data["frames"]).index(o))
        doc = PlanDocument(
            feasible=bool(data["feasible"]),
            target=data["target"],
            goal=_pose(data["goal"], "goal"),
            tolerance=[float(v) for v in data["tolerance"]],
            frame_ids=list(data["frames"]),
            object_ids=object_ids,
            states=[
                Configuration(tuple(s["q"]), {o: _pose(s["objects"][o], f"pose of '{o}'") for o in object_ids})
                for s in states
            ],
            switches=[
                AttachmentEvent(int(e["t"]), e["type"], e["parent"], e["child"], _pose(e["rel_pose"], "rel_pose"))
                for e in data["switches"]
            ],
            contacts=[
                ContactEntry(c["waypoint"], c["object"], c["manipulator"], c["local"], c["world"],
                             c["normal"], c["source"], c["u"])
                for c in data["contacts"]
            ],
            waypoints=[_pose(w, "waypoint") for w in data["waypoints"]],
            spacing=data["spacing"],
            metrics=dict(data["metrics"]),
            sub_plans=list(data.get("sub_plans", [])),
            reason=data.get("reason"),
        )
    except (KeyError, IndexError, TypeError, ValueError) as e:
        return None, f"Malformed plan file: {e}"
    return doc, None


def load_plan(path):
    data, error_message = load_json(path)
    if error_message:
        return None, error_message
    return validate_plan(data)


def report_to_dict(report):
    """
    Metrics report with timings, written by --report.
    """
    metrics = _metrics(report.metrics, True)
    metrics["feasible"] = report.feasible
    metrics["reason"] = report.reason
    metrics["contacts"] = len(report.contacts)
    metrics["sub_plans"] = [_metrics(sub.metrics, True) for sub in report.sub_plans]
    return metrics
