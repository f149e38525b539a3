import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .geometry import Pose2, interpolate_pose, pose_distance, signed_distance, wrap_angle
from .optimizer import SolverSettings, TrajectoryProblem, solve
from .predicates import DEFAULT_MARGIN, accel_feature, collision_feature, pose_eq_feature

logger = logging.getLogger(__name__)


class PlanningFailureError(RuntimeError):
    def __init__(self, message, node_count):
        super().__init__(f"{message} ({node_count} nodes)")
        self.node_count = node_count


@dataclass
class RrtSettings:
    step: float = 0.05
    goal_bias: float = 0.1
    # None uses the object's circumscribed radius
    angular_weight: Optional[float] = None
    # None uses the scene bounds
    bounds: Optional[Tuple[float, float, float, float]] = None
    resolution: float = 0.01
    goal_tolerance: Tuple[float, float] = (0.02, 0.1)
    max_nodes: int = 5000
    seed: int = 0
    clearance: float = DEFAULT_MARGIN

    def __post_init__(self):
        if not (self.step > 0 and self.resolution > 0 and self.max_nodes > 0):
            raise ValueError("RRT step, resolution and max_nodes must be positive")
        if not 0 < self.goal_bias < 1:
            raise ValueError(f"goal_bias must lie in (0, 1), got {self.goal_bias}")
        if self.angular_weight is not None and self.angular_weight <= 0:
            raise ValueError("angular_weight must be positive")
        if min(self.goal_tolerance) <= 0 or self.clearance < 0:
            raise ValueError("goal tolerance must be positive and clearance non-negative")


@dataclass(frozen=True)
class WaypointList:
    waypoints: Tuple[Pose2, ...]
    spacing: float
    source_path_length: float

    def __len__(self):
        return len(self.waypoints)

    def __getitem__(self, index):
        return self.waypoints[index]


@dataclass
class SmoothingResult:
    path: List[Pose2]
    fallback: bool
    initial_cost: float
    cost: float
    history: list = field(default_factory=list)


def path_length(path):
    """
    Translational length of a pose polyline.
    """
    return float(sum(math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(path, path[1:])))


def densify_path(path, resolution, angular_weight=0.0):
    """
    Poses along a path at most `resolution` apart under the SE(2) metric, endpoints included.
    """
    if not path:
        return []
    dense = [path[0]]
    for a, b in zip(path, path[1:]):
        count = max(1, math.ceil(pose_distance(a, b, angular_weight) / resolution))
        dense.extend(interpolate_pose(a, b, i / count) for i in range(1, count + 1))
    return dense


class _ClearanceChecker:
    def __init__(self, shape, fixtures, bounds, threshold):
        self.shape = shape
        self.fixtures = fixtures
        self.bounds = bounds
        self.threshold = threshold

    def clearance(self, pose):
        best = math.inf
        for fixture_shape, fixture_pose in self.fixtures:
            best = min(best, signed_distance(self.shape, pose, fixture_shape, fixture_pose).distance)
        return best

    def in_bounds(self, pose):
        x_min, y_min, x_max, y_max = self.bounds
        return x_min <= pose.x <= x_max and y_min <= pose.y <= y_max

    def pose_free(self, pose):
        return self.in_bounds(pose) and self.clearance(pose) >= self.threshold

    def motion_free(self, a, b, resolution, angular_weight):
        count = max(1, math.ceil(pose_distance(a, b, angular_weight) / resolution))
        return all(self.pose_free(interpolate_pose(a, b, i / count)) for i in range(1, count + 1))


def plan_object_path(scene, obj_id, start, goal, settings=None):
    """
    Plans a path for the object alone against the static fixtures that block it.

    The robot and the other movable objects are ignored.

    Args:
        scene (Scene): The scene.
        obj_id (str): The target object.
        start (Pose2): Start pose.
        goal (Pose2): Goal pose.
        settings (RrtSettings, optional): Tree hyperparameters.

    Returns:
        list: Poses from start to goal.
    """
    settings = settings or RrtSettings()
    shape = scene.frame(obj_id).shape
    if shape is None:
        raise PlanningFailureError(f"object '{obj_id}' has no shape", 0)
    weight = settings.angular_weight or shape.bounding_radius
    bounds = settings.bounds or scene.bounds
    checker = _ClearanceChecker(shape, scene.static_fixtures_for(obj_id), bounds, 0.0)

    start_clearance = checker.clearance(start)
    if start_clearance <= 0:
        raise PlanningFailureError(f"start pose of '{obj_id}' collides with a fixture", 0)
    checker.threshold = min(settings.clearance, start_clearance)

    rng = np.random.default_rng(settings.seed)
    nodes = np.array([[start.x, start.y, start.theta]])
    parents = [-1]
    tol_pos, tol_ang = settings.goal_tolerance
    max_samples = 20 * settings.max_nodes

    for _ in range(max_samples):
        if len(parents) >= settings.max_nodes:
            break
        if rng.random() < settings.goal_bias:
            sample = goal
        else:
            x_min, y_min, x_max, y_max = bounds
            sample = Pose2(rng.uniform(x_min, x_max), rng.uniform(y_min, y_max), rng.uniform(-math.pi, math.pi))

        dtheta = np.abs((sample.theta - nodes[:, 2] + math.pi) % (2.0 * math.pi) - math.pi)
        distances = np.hypot(sample.x - nodes[:, 0], sample.y - nodes[:, 1]) + weight * dtheta
        nearest_index = int(np.argmin(distances))
        nearest = Pose2.from_array(nodes[nearest_index])
        gap = float(distances[nearest_index])
        if gap < 1e-12:
            continue
        new = sample if gap <= settings.step else interpolate_pose(nearest, sample, settings.step / gap)
        if not checker.motion_free(nearest, new, settings.resolution, weight):
            continue

        nodes = np.vstack([nodes, new.as_array()])
        parents.append(nearest_index)

        close = (
            math.hypot(goal.x - new.x, goal.y - new.y) <= max(tol_pos, settings.step)
            and abs(wrap_angle(goal.theta - new.theta)) <= max(tol_ang, settings.step / weight)
        )
        if close and checker.motion_free(new, goal, settings.resolution, weight):
            path = [goal]
            index = len(parents) - 1
            while index >= 0:
                path.append(Pose2.from_array(nodes[index]))
                index = parents[index]
            path.reverse()
            if pose_distance(path[-2], goal, weight) < 1e-12:
                path.pop(-2)
            logger.debug("Object path found", extra={"object": obj_id, "nodes": len(parents), "poses": len(path)})
            return path

    raise PlanningFailureError(f"no path for '{obj_id}' to its goal", len(parents))


def _accel_cost(problem_scene, vectors):
    total = 0.0
    for t in range(2, len(vectors)):
        feature = accel_feature(problem_scene, t)
        residual = feature.eval([vectors[t - 2], vectors[t - 1], vectors[t]])
        total += float(residual @ residual)
    return total


def smooth_path(scene, obj_id, raw_path, settings=None, margin=DEFAULT_MARGIN):
    """
    Smooths an object path by trajectory optimization over the object pose alone.

    Keeps the endpoints, minimizes accelerations and stays clear of the static
    fixtures. Falls back to the raw path when the optimized one is infeasible or
    costlier.

    Args:
        scene (Scene): The scene.
        obj_id (str): The object the path belongs to.
        raw_path (list): Poses from the tree planner.
        settings (SolverSettings, optional): Solver settings.
        margin (float): Clearance to the fixtures.

    Returns:
        SmoothingResult: The smoothed path and whether it fell back.
    """
    sub = scene.object_subscene(obj_id)
    config = sub.default_configuration()
    states = [config.with_object_pose(obj_id, pose) for pose in raw_path]
    vectors = np.array([sub.pack(c) for c in states])
    vectors[:, 2] = np.unwrap(vectors[:, 2])
    initial_cost = _accel_cost(sub, vectors)

    T = len(raw_path) - 1
    if T < 2:
        return SmoothingResult(list(raw_path), False, initial_cost, initial_cost)

    features = [accel_feature(sub, t) for t in range(2, T + 1)]
    features += [collision_feature(sub, t, (), margin) for t in range(T + 1)]
    features.append(pose_eq_feature(sub, obj_id, raw_path[-1], T))
    problem = TrajectoryProblem(
        scene=sub,
        horizon=T,
        steps_per_phase=T,
        features=features,
        switches=[],
        init=states[0],
        initial_states=states,
        free_objects=(obj_id,),
    )
    trajectory = solve(problem, settings or SolverSettings())
    cost = trajectory.cost

    if not trajectory.feasible or cost > initial_cost + 1e-12:
        logger.warning(
            "Path smoothing fell back to the raw path",
            extra={"object": obj_id, "feasible": trajectory.feasible, "cost": cost, "initial_cost": initial_cost},
        )
        return SmoothingResult(list(raw_path), True, initial_cost, initial_cost, trajectory.history)

    path = [s.object_poses[obj_id] for s in trajectory.states]
    path[0] = raw_path[0]
    path[-1] = raw_path[-1]
    return SmoothingResult(path, False, initial_cost, cost, trajectory.history)


def interpolate_waypoints(path, spacing):
    """
    Resamples a path into waypoints at equal arc-length spacing no larger than `spacing`.

    Args:
        path (list): Poses, at least two.
        spacing (float): Maximum node distance L.

    Returns:
        WaypointList: Waypoints including both endpoints.
    """
    if spacing <= 0:
        raise ValueError(f"waypoint spacing must be positive, got {spacing}")
    if len(path) < 2:
        raise ValueError("interpolation needs a path of at least two poses")

    lengths = np.array([math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(path, path[1:])])
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
    total = float(cumulative[-1])
    segments = max(1, math.ceil(total / spacing - 1e-9))

    waypoints = [path[0]]
    for k in range(1, segments):
        arc = total * k / segments
        i = min(int(np.searchsorted(cumulative, arc, side="right")) - 1, len(lengths) - 1)
        fraction = (arc - cumulative[i]) / lengths[i] if lengths[i] > 0 else 0.0
        waypoints.append(interpolate_pose(path[i], path[i + 1], fraction))
    waypoints.append(path[-1])
    return WaypointList(tuple(waypoints), float(spacing), total)
