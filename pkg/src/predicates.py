import logging
import re
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .geometry import IDENTITY, Pose2, closest_boundary_point, relative_pose, transform_point, wrap_angle
from .optimizer import COST, EQ, INEQ, Feature, finite_difference_coefficients
from .scene import ATTACH, AttachmentEvent, SceneError

logger = logging.getLogger(__name__)

# Clearance every collision inequality keeps between shapes
DEFAULT_MARGIN = 0.005

SYMBOLIC = ("touch", "stable", "poseEq")

_LINE = re.compile(r"^\(\s*(\w+)\s+([^\s()]+)\s+([^\s()]+)\s*\)$")


class SkeletonError(ValueError):
    pass


@dataclass(frozen=True)
class PredicateInstance:
    name: str
    args: tuple
    phase: int
    active_window: Optional[Tuple[int, int]] = None


@dataclass(frozen=True)
class Skeleton:
    entries: Tuple[Tuple[int, PredicateInstance], ...] = ()

    @property
    def phases(self):
        return max((phase for phase, _ in self.entries), default=0)

    def predicates(self, name=None):
        return [p for _, p in self.entries if name is None or p.name == name]

    def to_lines(self):
        lines = []
        for _, p in self.entries:
            target = p.args[1]
            if isinstance(target, Pose2):
                target = "goal"
            lines.append(f"({p.name} {p.args[0]} {target})")
        return lines


@dataclass
class CompiledSkeleton:
    features: List[Feature]
    switches: List[AttachmentEvent]
    horizon: int
    touch_times: dict = field(default_factory=dict)
    # every predicate with the time-index range it constrains
    predicates: List[PredicateInstance] = field(default_factory=list)


def parse_skeleton(lines, bindings=None):
    """
    Parses skeleton lines such as "(touch ee box)" into phases.

    A stable line on the same pair as the touch line right before it is folded into
    that touch's phase. Placeholders {name} and the token "goal" are substituted from
    bindings.

    Args:
        lines (list): Skeleton lines, one predicate per line.
        bindings (dict, optional): Placeholder values; "goal" maps to a Pose2.

    Returns:
        Skeleton: The phased skeleton.
    """
    bindings = bindings or {}
    entries = []
    phase = 0
    previous = None
    for raw in lines:
        line = raw.strip()
        if not line:
            continue
        match = _LINE.match(line)
        if match is None:
            raise SkeletonError(f"malformed skeleton line '{line}'")
        name, first, second = match.groups()
        if name not in SYMBOLIC:
            raise SkeletonError(f"unknown predicate '{name}' in '{line}'")
        try:
            first = first.format(**{k: v for k, v in bindings.items() if isinstance(v, str)})
            second = second.format(**{k: v for k, v in bindings.items() if isinstance(v, str)})
        except KeyError as e:
            raise SkeletonError(f"unbound placeholder {e} in '{line}'") from None
        if name == "poseEq":
            if second != "goal":
                raise SkeletonError(f"poseEq expects the goal token, got '{second}'")
            if not isinstance(bindings.get("goal"), Pose2):
                raise SkeletonError("poseEq needs a goal pose binding")
            args = (first, bindings["goal"])
        else:
            args = (first, second)

        folded = (
            name == "stable" and previous is not None
            and previous.name == "touch" and previous.args == args and previous.phase == phase
        )
        if not folded:
            phase += 1
        instance = PredicateInstance(name, args, phase)
        entries.append((phase, instance))
        previous = instance
    return Skeleton(tuple(entries))


def touch_residual(scene, config, manip_id, obj_id, poses=None):
    """
    Signed distance between the manipulator and object surfaces; zero iff they touch.
    """
    for frame_id in (manip_id, obj_id):
        if scene.frame(frame_id).shape is None:
            raise SceneError(f"touch needs a shape on frame '{frame_id}'")
    return scene.pair_distance(config, manip_id, obj_id, poses).distance


def pose_eq_residual(config, obj_id, target, scene=None):
    """
    Difference between an object's pose and a target, angle on the shortest arc.

    Args:
        config (Configuration): Configuration holding the object pose.
        obj_id (str): Movable object or tool.
        target (Pose2): Target pose.
        scene (Scene, optional): Resolves attached objects through forward kinematics.

    Returns:
        np.ndarray: (dx, dy, dtheta).
    """
    if scene is not None:
        if not scene.frame(obj_id).is_object:
            raise SceneError(f"poseEq needs a movable object or tool, got '{obj_id}'")
        pose = scene.forward_kinematics(config, obj_id)
    else:
        if obj_id not in config.object_poses:
            raise SceneError(f"poseEq needs a movable object or tool, got '{obj_id}'")
        pose = config.object_poses[obj_id]
    return np.array([pose.x - target.x, pose.y - target.y, wrap_angle(pose.theta - target.theta)])


def manipulator_point(scene, poses, manip_id, point):
    """
    Point on the manipulator surface nearest a world point.
    """
    frame = scene.frame(manip_id)
    if frame.shape is None:
        return poses[manip_id].position
    return closest_boundary_point(frame.shape, poses[manip_id], point)


def _poses(scene, x):
    config = scene.unpack(x)
    return config, scene.world_poses(config)


def touch_feature(scene, manip_id, obj_id, t):
    def evaluate(states):
        config, poses = _poses(scene, states[-1])
        return np.array([touch_residual(scene, config, manip_id, obj_id, poses)])
    return Feature(f"touch({manip_id},{obj_id})", EQ, 0, t, 1, evaluate)


def pose_eq_feature(scene, obj_id, target, t):
    def evaluate(states):
        return pose_eq_residual(scene.unpack(states[-1]), obj_id, target, scene)
    return Feature(f"poseEq({obj_id})", EQ, 0, t, 3, evaluate)


def stable_feature(scene, manip_id, obj_id, t):
    def relative(x):
        _, poses = _poses(scene, x)
        return relative_pose(poses[manip_id], poses[obj_id])

    def evaluate(states):
        before = relative(states[0])
        after = relative(states[1])
        return np.array([after.x - before.x, after.y - before.y, wrap_angle(after.theta - before.theta)])
    return Feature(f"stable({manip_id},{obj_id})", EQ, 1, t, 3, evaluate)


def collision_feature(scene, t, ignore_pairs=(), margin=DEFAULT_MARGIN):
    def evaluate(states):
        config, poses = _poses(scene, states[-1])
        result = scene.scene_min_distance(config, ignore_pairs, poses)
        return np.array([margin - min(result.distance, 1e3)])
    return Feature("collision_free", INEQ, 0, t, 1, evaluate)


def joint_limits_feature(scene, t):
    lower = np.array([scene.frames[j].joint.limits[0] for j in scene.joint_ids])
    upper = np.array([scene.frames[j].joint.limits[1] for j in scene.joint_ids])
    n = scene.n_joints

    def evaluate(states):
        q = states[-1][:n]
        return np.concatenate([lower - q, q - upper])

    def jac(states):
        J = np.zeros((2 * n, len(states[-1])))
        J[:n, :n] = -np.eye(n)
        J[n:, :n] = np.eye(n)
        return J
    return Feature("joint_limits", INEQ, 0, t, 2 * n, evaluate, jac)


def difference_feature(name, kind, order, t, dims, size, weight=1.0):
    """
    Weighted k-th backward difference of the selected dimensions, with its analytic Jacobian.
    """
    dims = np.asarray(dims, dtype=int)
    coefficients = finite_difference_coefficients(order)

    def evaluate(states):
        return weight * sum(c * s[dims] for c, s in zip(coefficients, states))

    def jac(states):
        J = np.zeros((len(dims), size * (order + 1)))
        for s, c in enumerate(coefficients):
            J[np.arange(len(dims)), s * size + dims] = weight * c
        return J
    return Feature(name, kind, order, t, len(dims), evaluate, jac)


def accel_feature(scene, t, weight=1.0):
    return difference_feature("accel_cost", COST, 2, t, range(scene.dim), scene.dim, weight)


def switch_continuity_feature(scene, t):
    return difference_feature("switch_continuity", EQ, 2, t, range(scene.n_joints), scene.dim)


def contact_proximity_feature(scene, manip_id, obj_id, local_point, t, weight=1.0):
    scale = np.sqrt(weight)

    def evaluate(states):
        _, poses = _poses(scene, states[-1])
        target = transform_point(poses[obj_id], local_point)
        return scale * (manipulator_point(scene, poses, manip_id, target) - target)
    return Feature(f"contact_proximity({manip_id},{obj_id})", COST, 0, t, 2, evaluate)


def _check_frames(scene, instance):
    for arg in instance.args:
        if isinstance(arg, str):
            try:
                scene.frame(arg)
            except SceneError as e:
                raise SkeletonError(f"{instance.name}: {e}") from None


def compile(skeleton, scene, steps_per_phase, contact=None, margin=DEFAULT_MARGIN, proximity_weight=1.0):
    """
    Turns a skeleton into the features and switches of a trajectory problem.

    Args:
        skeleton (Skeleton): The phased skeleton.
        scene (Scene): Scene at the start of the problem.
        steps_per_phase (int): Timesteps per phase.
        contact (ContactPoint, optional): Contact point pulling the manipulator at the touch instant.
        margin (float): Collision clearance.
        proximity_weight (float): Weight of the contact-proximity cost.

    Returns:
        CompiledSkeleton: Features, switch events and the horizon.
    """
    if steps_per_phase < 1:
        raise SkeletonError("steps_per_phase must be at least 1")
    phases = [phase for phase, _ in skeleton.entries]
    if phases and (phases[0] != 1 or any(b - a not in (0, 1) for a, b in zip(phases, phases[1:]))):
        raise SkeletonError(f"skeleton phases must be contiguous from 1, got {phases}")

    T = steps_per_phase * max(1, skeleton.phases)
    features = []
    switches = []
    touch_times = {}
    attached_at = {}
    windowed = []

    for phase, instance in skeleton.entries:
        _check_frames(scene, instance)
        t_end = phase * steps_per_phase
        if instance.name == "touch":
            manip_id, obj_id = instance.args
            if scene.frame(manip_id).shape is None or scene.frame(obj_id).shape is None:
                raise SkeletonError(f"touch needs shapes on '{manip_id}' and '{obj_id}'")
            features.append(touch_feature(scene, manip_id, obj_id, t_end))
            touch_times[(manip_id, obj_id)] = t_end
            windowed.append(replace(instance, active_window=(t_end, t_end)))
            # the sampled contact only pulls in the touch it was drawn for
            if contact is not None and contact.object_id == obj_id and contact.manipulator in (None, manip_id):
                features.append(contact_proximity_feature(
                    scene, manip_id, obj_id, contact.local, t_end, proximity_weight))
                windowed.append(PredicateInstance("contact_proximity", (manip_id, contact), phase, (t_end, t_end)))
        elif instance.name == "stable":
            manip_id, obj_id = instance.args
            if not scene.frame(obj_id).is_object:
                raise SkeletonError(f"stable needs a movable object or tool, got '{obj_id}'")
            if scene.attached_parent(obj_id) is not None or obj_id in attached_at:
                raise SkeletonError(f"'{obj_id}' is already attached")
            switches.append(AttachmentEvent(t_end, ATTACH, manip_id, obj_id, IDENTITY))
            attached_at[obj_id] = t_end
            for t in range(t_end + 1, T + 1):
                features.append(stable_feature(scene, manip_id, obj_id, t))
            windowed.append(replace(instance, active_window=(t_end, T)))
            if t_end + 1 <= T:
                features.append(switch_continuity_feature(scene, t_end + 1))
        else:
            obj_id, target = instance.args
            if not scene.frame(obj_id).is_object:
                raise SkeletonError(f"poseEq needs a movable object or tool, got '{obj_id}'")
            moves = scene.attached_parent(obj_id) is not None or attached_at.get(obj_id, T) < t_end
            if not moves:
                raise SkeletonError(f"poseEq on '{obj_id}' but nothing moves it before t={t_end}")
            features.append(pose_eq_feature(scene, obj_id, target, t_end))
            windowed.append(replace(instance, active_window=(t_end, t_end)))

    for t in range(T + 1):
        ignore = [pair for pair, t_touch in touch_times.items() if t >= t_touch]
        features.append(collision_feature(scene, t, ignore, margin))
        if scene.n_joints:
            features.append(joint_limits_feature(scene, t))
    for t in range(2, T + 1):
        features.append(accel_feature(scene, t))
    windowed.append(PredicateInstance("collision_free", (), 0, (0, T)))
    if scene.n_joints:
        windowed.append(PredicateInstance("joint_limits", (), 0, (0, T)))
    windowed.append(PredicateInstance("accel_cost", (), 0, (2, T)))

    logger.debug(
        "Compiled skeleton",
        extra={"phases": skeleton.phases, "horizon": T, "features": len(features), "switches": len(switches)},
    )
    return CompiledSkeleton(features, switches, T, touch_times, windowed)
