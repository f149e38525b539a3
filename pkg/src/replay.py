import logging
import math
from dataclasses import dataclass

from .geometry import wrap_angle
from .predicates import DEFAULT_MARGIN
from .scene import ATTACH, DETACH, SceneError

logger = logging.getLogger(__name__)

# Slack on recorded quantities that came out of a solver run
SOLVER_SLACK = 2e-3
# Slack on quantities that are exact by construction
EXACT_SLACK = 1e-9


@dataclass(frozen=True)
class Violation:
    kind: str
    t: int
    value: float
    detail: str


def check_compatible(scene, doc):
    if list(scene.frames) != list(doc.frame_ids):
        raise SceneError(
            f"plan frames {doc.frame_ids} do not match scene frames {list(scene.frames)}"
        )
    if scene.attachments:
        raise SceneError("replay needs the scene as loaded, without attachments")


def _pose_gap(a, b):
    return max(abs(a.x - b.x), abs(a.y - b.y), abs(wrap_angle(a.theta - b.theta)))


def check_plan(scene, doc, margin=DEFAULT_MARGIN, slack=SOLVER_SLACK):
    """
    Re-verifies a recorded plan against its scene.

    Replays the switches, checks that attached objects follow their parents and
    that free objects stay put, and re-checks collision margins, joint limits,
    waypoint spacing and the final goal test.

    Args:
        scene (Scene): The scene the plan was made in.
        doc (PlanDocument): The recorded plan.
        margin (float): Collision clearance the plan was made with.
        slack (float): Allowed shortfall on solver-enforced constraints.

    Returns:
        list: Violation entries ordered by timestep.
    """
    check_compatible(scene, doc)
    violations = []
    events = sorted(doc.switches, key=lambda e: e.time_index)
    current = scene
    cursor = 0

    for t, config in enumerate(doc.states):
        if len(config.q) != scene.n_joints:
            raise SceneError(f"state {t} has {len(config.q)} joints, the scene has {scene.n_joints}")
        released = []
        while cursor < len(events) and events[cursor].time_index == t:
            event = events[cursor]
            cursor += 1
            if event.type == ATTACH:
                captured = current.capture_event(t, ATTACH, event.parent_id, event.child_id, config).rel_pose
                gap = _pose_gap(captured, event.rel_pose)
                if gap > EXACT_SLACK:
                    violations.append(Violation("switch", t, gap, f"attach {event.child_id} to {event.parent_id}"))
            elif event.type == DETACH:
                released.append((event.parent_id, event.child_id))
            try:
                current, _ = current.apply_attachment(event, config)
            except SceneError as e:
                violations.append(Violation("switch", t, math.inf, str(e)))

        poses = current.world_poses(config)
        for child_id in current.attachments:
            gap = _pose_gap(poses[child_id], config.object_poses[child_id])
            if gap > EXACT_SLACK:
                violations.append(Violation("attachment_drift", t, gap, child_id))
        if t > 0:
            previous = doc.states[t - 1]
            for obj_id in scene.object_ids:
                if obj_id in current.attachments or any(child == obj_id for _, child in released):
                    continue
                gap = _pose_gap(previous.object_poses[obj_id], config.object_poses[obj_id])
                if gap > EXACT_SLACK:
                    violations.append(Violation("object_motion", t, gap, f"{obj_id} moved while free"))

        nearest = current.scene_min_distance(config, released, poses)
        if nearest.distance < margin - slack:
            violations.append(Violation("collision", t, nearest.distance, " vs ".join(nearest.pair)))

        for frame_id, value in zip(scene.joint_ids, config.q):
            lo, hi = scene.frames[frame_id].joint.limits
            excess = max(lo - value, value - hi)
            if excess > slack:
                violations.append(Violation("joint_limit", t, excess, frame_id))

    if doc.spacing is not None:
        for i, (a, b) in enumerate(zip(doc.waypoints, doc.waypoints[1:]), start=1):
            step = math.hypot(b.x - a.x, b.y - a.y)
            if step > doc.spacing + EXACT_SLACK:
                violations.append(Violation("waypoint_spacing", i, step, f"spacing {doc.spacing}"))

    if doc.feasible and doc.states:
        final = current.forward_kinematics(doc.states[-1], doc.target)
        tau_pos, tau_ang = doc.tolerance
        offset = math.hypot(final.x - doc.goal.x, final.y - doc.goal.y)
        turn = abs(wrap_angle(final.theta - doc.goal.theta))
        if offset > tau_pos or turn > tau_ang:
            violations.append(Violation("goal", len(doc.states) - 1, max(offset, turn), doc.target))

    logger.debug("Checked plan", extra={"states": len(doc.states), "violations": len(violations)})
    return sorted(violations, key=lambda v: (v.t, v.kind))


def format_violations(violations):
    if not violations:
        return "no violations"
    rows = [f"{'kind':<18} {'t':>5} {'value':>12}  detail"]
    rows += [f"{v.kind:<18} {v.t:>5} {v.value:>12.6g}  {v.detail}" for v in violations]
    return "\n".join(rows)
