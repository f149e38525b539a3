import itertools
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .geometry import (
    boundary_normal,
    boundary_parameter,
    inverse_transform_point,
    sample_boundary_point,
    transform_point,
    wrap_angle,
)
from .optimizer import COST, EQ, Feature, SolverSettings, TrajectoryProblem, solve
from .predicates import DEFAULT_MARGIN, collision_feature, joint_limits_feature, manipulator_point, touch_feature
from .scene import SceneError

logger = logging.getLogger(__name__)

POINTCLOUD = "pointcloud"
HEURISTIC = "heuristic"
EXTERNAL = "external"

# Boundary bins the heuristic sampler weighs
HEURISTIC_BINS = 64
HEURISTIC_SHARPNESS = 4.0

# Weight of the minimum-motion cost of the reachability check
DEVIATION_WEIGHT = 0.1


class ContactFailureError(RuntimeError):
    def __init__(self, message, attempts):
        super().__init__(f"{message} after {attempts} attempts")
        self.attempts = attempts


@dataclass(frozen=True, eq=False)
class ContactPoint:
    object_id: str
    local: np.ndarray
    world: np.ndarray
    outward_normal: np.ndarray
    source: str
    u: float = 0.0
    attempts: int = 1
    manipulator: Optional[str] = None
    touch_config: Optional[object] = None

    @classmethod
    def from_parameter(cls, scene, config, obj_id, u, source, **kwargs):
        shape = scene.frame(obj_id).shape
        if shape is None:
            raise SceneError(f"object '{obj_id}' has no shape to contact")
        local = sample_boundary_point(shape, u)
        world = transform_point(scene.forward_kinematics(config, obj_id), local)
        return cls(obj_id, local, world, boundary_normal(shape, u), source, float(u), **kwargs)


@dataclass(frozen=True)
class ContactCheck:
    feasible: bool
    final_config: object
    max_eq_violation: float
    max_ineq_violation: float
    restarts: int


@dataclass(frozen=True)
class SamplerPlugin:
    """
    A contact-point proposer.

    propose(scene, config, obj_id, motion_direction, rng) returns a boundary parameter in [0, 1).
    """
    name: str
    propose: Callable
    source: str = EXTERNAL


def _pointcloud_propose(scene, config, obj_id, motion_direction, rng):
    cloud = scene.point_cloud(config, obj_id, 32, seed=int(rng.integers(2 ** 31)))
    point = cloud[int(rng.integers(len(cloud)))]
    local = inverse_transform_point(scene.forward_kinematics(config, obj_id), point)
    return boundary_parameter(scene.frame(obj_id).shape, local)


def pointcloud_sampler():
    return SamplerPlugin("pointcloud", _pointcloud_propose, POINTCLOUD)


def heuristic_sampler(motion_direction=None):
    """
    Sampler that favors the boundary arc facing away from the motion direction.

    Args:
        motion_direction (array-like, optional): Fixed push direction in the world
            frame; when None the direction passed to propose is used.

    Returns:
        SamplerPlugin: The heuristic sampler.
    """
    fixed = None if motion_direction is None else np.asarray(motion_direction, dtype=float)

    def propose(scene, config, obj_id, direction, rng):
        direction = fixed if fixed is not None else direction
        norm = 0.0 if direction is None else float(np.linalg.norm(direction))
        if norm < 1e-12:
            return float(rng.random())
        shape = scene.frame(obj_id).shape
        theta = scene.forward_kinematics(config, obj_id).theta
        heading = np.asarray(direction, dtype=float) / norm
        local_heading = np.array([
            math.cos(theta) * heading[0] + math.sin(theta) * heading[1],
            -math.sin(theta) * heading[0] + math.cos(theta) * heading[1],
        ])
        centers = (np.arange(HEURISTIC_BINS) + 0.5) / HEURISTIC_BINS
        normals = np.array([boundary_normal(shape, u) for u in centers])
        weights = np.exp(HEURISTIC_SHARPNESS * -(normals @ local_heading))
        k = int(rng.choice(HEURISTIC_BINS, p=weights / weights.sum()))
        return float((k + rng.random()) / HEURISTIC_BINS) % 1.0
    return SamplerPlugin("heuristic", propose, HEURISTIC)


def load_candidates(path):
    """
    Reads `object_id u` lines into per-object candidate lists.
    """
    candidates = {}
    with open(path, "r") as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{number}: expected 'object_id u', got '{line}'")
            try:
                u = float(parts[1])
            except ValueError:
                raise ValueError(f"{path}:{number}: '{parts[1]}' is not a number") from None
            if not 0.0 <= u < 1.0:
                raise ValueError(f"{path}:{number}: u={u} outside [0, 1)")
            candidates.setdefault(parts[0], []).append(u)
    return candidates


def file_sampler(path):
    """
    Sampler replaying boundary parameters from a candidate file, cycling per object.

    Objects without candidates fall back to uniform proposals.
    """
    candidates = load_candidates(path)
    cycles = {obj_id: itertools.cycle(values) for obj_id, values in candidates.items()}

    def propose(scene, config, obj_id, direction, rng):
        if obj_id not in cycles:
            logger.warning("No external candidates for object, sampling uniformly", extra={"object": obj_id})
            return float(rng.random())
        return next(cycles[obj_id])
    return SamplerPlugin(f"file:{path}", propose, EXTERNAL)


SAMPLERS = {
    "pointcloud": pointcloud_sampler,
    "heuristic": heuristic_sampler,
}


def manipulator_arm(scene, manip_id):
    for frame_id in [manip_id] + scene.ancestors(manip_id):
        arm = scene.arm_for(frame_id)
        if arm is not None:
            return arm
    return None


def reach_bound(scene, config, manip_id):
    """
    Arm base and an upper bound on how far from it the manipulator surface can get.
    """
    arm = manipulator_arm(scene, manip_id)
    if arm is None:
        return None, math.inf
    chain = scene.arms[arm]
    bound = scene.reach(arm)
    if manip_id not in chain:
        poses = scene.world_poses(config)
        tip = poses[chain[-1]]
        manip = scene.frame(manip_id)
        extent = manip.shape.bounding_radius if manip.shape is not None else 0.0
        bound += math.hypot(poses[manip_id].x - tip.x, poses[manip_id].y - tip.y) + extent
    return scene.arm_base(arm, config), bound


def aimed_configuration(scene, config, manip_id, point):
    """
    Configuration with the arm's first joint pointing at a point and the rest straight.
    """
    arm = manipulator_arm(scene, manip_id)
    if arm is None:
        return config
    joints = [frame_id for frame_id in scene.arms[arm] if scene.frame(frame_id).joint is not None]
    if not joints:
        return config
    q = list(config.q)
    base = scene.arm_base(arm, config)
    first = scene.frame(joints[0])
    parent_theta = 0.0
    if first.parent is not None:
        parent_theta = scene.forward_kinematics(config, first.parent).theta
    heading = math.atan2(point[1] - base[1], point[0] - base[0])
    q[scene.joint_index(joints[0])] = wrap_angle(heading - parent_theta - first.rel_pose.theta)
    for frame_id in joints[1:]:
        q[scene.joint_index(frame_id)] = 0.0
    return scene.clamp(config.with_joints(tuple(q)))


def _contact_position_feature(scene, manip_id, obj_id, local_point):
    def evaluate(states):
        config = scene.unpack(states[-1])
        poses = scene.world_poses(config)
        target = transform_point(poses[obj_id], local_point)
        return manipulator_point(scene, poses, manip_id, target) - target
    return Feature(f"contact_position({manip_id},{obj_id})", EQ, 0, 0, 2, evaluate)


def _orientation_feature(scene, manip_id, obj_id, local_normal):
    def evaluate(states):
        config = scene.unpack(states[-1])
        poses = scene.world_poses(config)
        theta = poses[obj_id].theta
        inward = -np.array([
            math.cos(theta) * local_normal[0] - math.sin(theta) * local_normal[1],
            math.sin(theta) * local_normal[0] + math.cos(theta) * local_normal[1],
        ])
        return np.array([wrap_angle(poses[manip_id].theta - math.atan2(inward[1], inward[0]))])
    return Feature(f"approach({manip_id},{obj_id})", EQ, 0, 0, 1, evaluate)


def _deviation_feature(scene, reference):
    n = scene.n_joints
    reference = np.asarray(reference, dtype=float)
    scale = math.sqrt(DEVIATION_WEIGHT)

    def evaluate(states):
        return scale * (states[-1][:n] - reference)

    def jac(states):
        J = np.zeros((n, len(states[-1])))
        J[:, :n] = scale * np.eye(n)
        return J
    return Feature("min_motion", COST, 0, 0, n, evaluate, jac)


def check_contact_feasibility(scene, config, manip_id, contact, settings=None,
                              margin=DEFAULT_MARGIN, constrain_orientation=False):
    """
    Checks whether the manipulator can touch a contact point without collisions.

    Solves a single-configuration problem that keeps close to the current joints
    while putting the manipulator surface on the contact point, first from the
    current configuration and then from one aimed at the point.

    Args:
        scene (Scene): The scene.
        config (Configuration): Current configuration.
        manip_id (str): End-effector or held tool.
        contact (ContactPoint): Candidate contact on the target object.
        settings (SolverSettings, optional): Solver settings.
        margin (float): Collision clearance.
        constrain_orientation (bool): Also point the manipulator into the surface.

    Returns:
        ContactCheck: Verdict and the touching configuration.
    """
    settings = settings or SolverSettings()
    obj_id = contact.object_id
    world = transform_point(scene.forward_kinematics(config, obj_id), contact.local)

    base, bound = reach_bound(scene, config, manip_id)
    if base is not None and math.hypot(world[0] - base[0], world[1] - base[1]) > bound:
        logger.debug("Contact point beyond reach", extra={"manipulator": manip_id, "object": obj_id})
        return ContactCheck(False, config, math.inf, math.inf, 0)

    features = [
        _deviation_feature(scene, config.q),
        _contact_position_feature(scene, manip_id, obj_id, contact.local),
        touch_feature(scene, manip_id, obj_id, 0),
        collision_feature(scene, 0, [(manip_id, obj_id)], margin),
    ]
    if scene.n_joints:
        features.append(joint_limits_feature(scene, 0))
    if constrain_orientation:
        features.append(_orientation_feature(scene, manip_id, obj_id, contact.outward_normal))

    best = None
    starts = [config, aimed_configuration(scene, config, manip_id, world)]
    for restart, start in enumerate(starts):
        problem = TrajectoryProblem(scene, 0, 1, features, [], start)
        trajectory = solve(problem, settings)
        check = ContactCheck(
            trajectory.feasible, trajectory.states[0],
            trajectory.max_eq_violation, trajectory.max_ineq_violation, restart,
        )
        if check.feasible:
            return check
        if best is None or check.max_eq_violation + check.max_ineq_violation < \
                best.max_eq_violation + best.max_ineq_violation:
            best = check
    return best


def generate_contact_point(scene, config, obj_id, manip_id, sampler, max_attempts=25, rng=None,
                           motion_direction=None, settings=None, margin=DEFAULT_MARGIN,
                           constrain_orientation=False, deadline=None):
    """
    Samples contact points on an object until one the manipulator can reach.

    Args:
        scene (Scene): The scene.
        config (Configuration): Current configuration.
        obj_id (str): Target object.
        manip_id (str): Acting manipulator.
        sampler (SamplerPlugin): Proposal source.
        max_attempts (int): Proposals before giving up.
        rng (np.random.Generator, optional): Random generator; seeded with 0 when None.
        motion_direction (array-like, optional): Direction the object should move next.
        settings (SolverSettings, optional): Solver settings of the reachability check.
        deadline (float, optional): time.perf_counter() value after which no new candidate is tried.

    Returns:
        ContactPoint: The accepted contact, with its touching configuration.
    """
    shape = scene.frame(obj_id).shape
    if shape is None:
        raise SceneError(f"object '{obj_id}' has no shape to contact")
    scene.frame(manip_id)
    rng = rng if rng is not None else np.random.default_rng(0)

    for attempt in range(1, max_attempts + 1):
        if deadline is not None and time.perf_counter() > deadline:
            raise ContactFailureError(f"time budget exhausted sampling '{obj_id}' for '{manip_id}'", attempt - 1)
        u = float(sampler.propose(scene, config, obj_id, motion_direction, rng))
        if not 0.0 <= u < 1.0:
            raise ValueError(f"sampler '{sampler.name}' proposed u={u} outside [0, 1)")
        candidate = ContactPoint.from_parameter(scene, config, obj_id, u, sampler.source, attempts=attempt,
                                                manipulator=manip_id)
        check = check_contact_feasibility(scene, config, manip_id, candidate, settings, margin,
                                          constrain_orientation)
        logger.debug(
            "Screened contact candidate",
            extra={"object": obj_id, "manipulator": manip_id, "attempt": attempt, "u": u, "feasible": check.feasible},
        )
        if check.feasible:
            return ContactPoint(
                obj_id, candidate.local, candidate.world, candidate.outward_normal, candidate.source,
                u, attempt, manip_id, check.final_config,
            )
    raise ContactFailureError(f"no reachable contact on '{obj_id}' for '{manip_id}'", max_attempts)
