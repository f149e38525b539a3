import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .contact import (
    SAMPLERS,
    ContactFailureError,
    ContactPoint,
    SamplerPlugin,
    generate_contact_point,
    reach_bound,
)
from .geometry import Pose2, signed_distance, wrap_angle
from .optimizer import NumericalFailureError, SolverSettings, TrajectoryProblem, solve
from .predicates import DEFAULT_MARGIN, SkeletonError, compile, parse_skeleton
from .scene import ATTACH, DETACH, AttachmentEvent, SceneError
from .waypoints import (
    PlanningFailureError,
    RrtSettings,
    WaypointList,
    densify_path,
    interpolate_waypoints,
    plan_object_path,
    smooth_path,
)

logger = logging.getLogger(__name__)

# Wall-clock budget of one plan call, in seconds
HMAP_TIME_BUDGET_S = float(os.environ.get("HMAP_TIME_BUDGET_S", "120"))

# Sub-path template: grab the object at a contact and carry it to the waypoint
DEFAULT_SKELETON = ("(touch {manip} {obj})", "(stable {manip} {obj})", "(poseEq {obj} goal)")
GRASP_SKELETON = ("(touch {manip} {obj})", "(stable {manip} {obj})")
HOLD_SKELETON = ("(poseEq {obj} goal)",)

# Depth limit of obstacle-removal sub-plans
MAX_SUB_PLAN_DEPTH = 2
RING_DIRECTIONS = 16


class ObstacleRemovalError(RuntimeError):
    pass


class ManipulatorsExhaustedError(RuntimeError):
    pass


@dataclass
class Task:
    target: str
    goal: Pose2
    skeleton_template: Sequence[str] = DEFAULT_SKELETON
    terminal_skeleton: Sequence[str] = ()
    tools: Sequence[str] = ()
    movable_obstacles: Sequence[str] = ()

    def validate(self, scene):
        """
        Checks the task's frame references.

        Returns:
            tuple: (True, None) if valid, (False, error_message) otherwise.
        """
        try:
            if not scene.frame(self.target).is_object:
                return False, f"target '{self.target}' is not a movable object"
            for frame_id in list(self.tools) + list(self.movable_obstacles):
                if not scene.frame(frame_id).is_object:
                    return False, f"'{frame_id}' is not a movable object or tool"
        except SceneError as e:
            return False, str(e)
        if self.target in self.movable_obstacles:
            return False, f"target '{self.target}' is also listed as an obstacle"
        return True, None


@dataclass
class PlannerConfig:
    tau_pos: float = 0.02
    tau_ang: float = 0.1
    spacing: float = 0.25
    j_max: int = 3
    spacing_floor: float = 0.05
    steps_per_phase: int = 8
    manipulator_order: Sequence[str] = ("ee",)
    reuse_contact: bool = True
    seed: int = 0
    time_budget: float = HMAP_TIME_BUDGET_S
    max_contact_attempts: int = 25
    sampler: object = "heuristic"
    margin: float = DEFAULT_MARGIN
    constrain_orientation: bool = False
    rrt: RrtSettings = field(default_factory=RrtSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if not (self.tau_pos > 0 and self.tau_ang > 0):
            raise ValueError("goal tolerances must be positive")
        if not self.spacing > self.spacing_floor > 0:
            raise ValueError(f"need spacing > spacing_floor > 0, got {self.spacing} and {self.spacing_floor}")
        if self.j_max < 1 or self.steps_per_phase < 1:
            raise ValueError("j_max and steps_per_phase must be at least 1")
        if not self.manipulator_order:
            raise ValueError("manipulator_order must not be empty")
        if self.time_budget <= 0:
            raise ValueError("time_budget must be positive")

    def sampler_plugin(self):
        if isinstance(self.sampler, SamplerPlugin):
            return self.sampler
        try:
            return SAMPLERS[self.sampler]()
        except KeyError:
            raise ValueError(f"unknown sampler '{self.sampler}'") from None


@dataclass
class PlanMetrics:
    wp_count: int = 0
    rrt_seconds: float = 0.0
    cp_seconds: float = 0.0
    komo_seconds: float = 0.0
    restarts: int = 0
    tool_used: Optional[str] = None
    obstacles_moved: List[str] = field(default_factory=list)
    optimizer_calls: int = 0


@dataclass(frozen=True, eq=False)
class ContactRecord:
    waypoint_index: int
    contact: ContactPoint


@dataclass
class PlanReport:
    feasible: bool
    states: list
    switches: List[AttachmentEvent]
    waypoints_used: List[WaypointList]
    contacts: List[ContactRecord]
    metrics: PlanMetrics
    sub_plans: list = field(default_factory=list)
    reason: Optional[str] = None
    final_scene: object = None

    @property
    def final_config(self):
        return self.states[-1]

    @property
    def waypoints(self):
        return self.waypoints_used[-1] if self.waypoints_used else None


class HMaPPlanner:
    """
    Drives one object to its goal through waypoints, re-grasping and switching
    manipulators when a waypoint cannot be reached.
    """

    def __init__(self, scene, task, config, planner_config=None, depth=0, release_at_end=False):
        self.planner_config = planner_config or PlannerConfig()
        self.task = task
        valid, error_message = task.validate(scene)
        if not valid:
            raise SceneError(error_message)
        scene.validate_configuration(config)
        self.scene = scene
        self.states = [scene.sync(config)]
        self.switches = []
        self.waypoints_used = []
        self.contacts = []
        self.sub_plans = []
        self.metrics = PlanMetrics()
        self.rng = np.random.default_rng(self.planner_config.seed)
        self.sampler = self.planner_config.sampler_plugin()
        self.depth = depth
        self.release_at_end = release_at_end
        self.deadline = None

    @property
    def config(self):
        return self.states[-1]

    @property
    def now(self):
        return len(self.states) - 1

    def _out_of_time(self):
        return self.deadline is not None and time.perf_counter() > self.deadline

    def object_pose(self, obj_id=None):
        return self.scene.forward_kinematics(self.config, obj_id or self.task.target)

    def goal_reached(self):
        pose = self.object_pose()
        goal = self.task.goal
        return (
            math.hypot(pose.x - goal.x, pose.y - goal.y) <= self.planner_config.tau_pos
            and abs(wrap_angle(pose.theta - goal.theta)) <= self.planner_config.tau_ang
        )

    def manipulator_order(self):
        order = list(self.planner_config.manipulator_order)
        order += [tool for tool in self.task.tools if tool not in order]
        return order

    def select_manipulator(self, failure_history):
        """
        Picks the acting manipulator: the end-effector first, then tools in order.

        Skips manipulators that already failed j_max times at this waypoint and tools
        lying beyond the end-effector's reach.

        Args:
            failure_history (dict): Manipulator id to failure count at this waypoint.

        Returns:
            str: The manipulator to use next.
        """
        order = self.manipulator_order()
        ee = order[0]
        for manip_id in order:
            if failure_history.get(manip_id, 0) >= self.planner_config.j_max:
                continue
            if manip_id != ee and self.scene.attached_parent(manip_id) is None \
                    and not self._tool_graspable(ee, manip_id):
                failure_history[manip_id] = self.planner_config.j_max
                logger.info("Tool beyond reach, skipping", extra={"tool": manip_id})
                continue
            return manip_id
        raise ManipulatorsExhaustedError(f"all manipulators failed to move '{self.task.target}'")

    def _tool_graspable(self, ee, tool_id):
        base, bound = reach_bound(self.scene, self.config, ee)
        if base is None:
            return True
        pose = self.object_pose(tool_id)
        extent = self.scene.frame(tool_id).shape.bounding_radius
        return math.hypot(pose.x - base[0], pose.y - base[1]) - extent <= bound

    def _append(self, states, events):
        offset = self.now
        self.states.extend(states[1:])
        self.switches.extend(event.shifted(offset) for event in events)

    def _detach(self, child_id):
        parent_id = self.scene.attached_parent(child_id)
        if parent_id is None:
            return
        event = AttachmentEvent(self.now, DETACH, parent_id, child_id, self.scene.attachments[child_id][1])
        self.scene, synced = self.scene.apply_attachment(event, self.config)
        self.states[-1] = synced
        self.switches.append(event)
        logger.debug("Released object", extra={"object": child_id, "manipulator": parent_id, "t": self.now})

    def _warm_start(self, compiled, contact):
        if contact is None or contact.touch_config is None or not compiled.touch_times:
            return None
        t_touch = min(compiled.touch_times.values())
        start = np.array(self.config.q)
        touch = np.array(contact.touch_config.q)
        states = []
        for t in range(compiled.horizon + 1):
            fraction = min(1.0, t / t_touch)
            states.append(self.config.with_joints(start + fraction * (touch - start)))
        return states

    def solve_sub_path(self, lines, bindings, contact=None):
        """
        Solves one sub-path from the current configuration and appends it when feasible.

        Args:
            lines (list): Skeleton lines.
            bindings (dict): Placeholder values for the skeleton.
            contact (ContactPoint, optional): Contact drawing the manipulator in.

        Returns:
            bool: Whether the sub-path was feasible and appended.
        """
        if self._out_of_time():
            logger.debug("Skipping sub-path solve past the time budget")
            return False
        settings = self.planner_config.solver
        skeleton = parse_skeleton(lines, bindings)
        compiled = compile(
            skeleton, self.scene, self.planner_config.steps_per_phase, contact,
            self.planner_config.margin, settings.proximity_weight,
        )
        problem = TrajectoryProblem(
            scene=self.scene,
            horizon=compiled.horizon,
            steps_per_phase=self.planner_config.steps_per_phase,
            features=compiled.features,
            switches=compiled.switches,
            init=self.config,
            initial_states=self._warm_start(compiled, contact),
        )
        started = time.perf_counter()
        try:
            trajectory = solve(problem, settings)
        except NumericalFailureError as e:
            logger.warning("Sub-path solve failed numerically", extra={"error": str(e)})
            return False
        finally:
            self.metrics.komo_seconds += time.perf_counter() - started
            self.metrics.optimizer_calls += 1

        if not trajectory.feasible:
            logger.debug(
                "Sub-path infeasible",
                extra={"max_eq": trajectory.max_eq_violation, "max_ineq": trajectory.max_ineq_violation},
            )
            return False

        states = list(trajectory.states)
        states[0] = self.config
        scene = self.scene
        events = []
        for switch in sorted(compiled.switches, key=lambda e: e.time_index):
            t_s = switch.time_index
            event = scene.capture_event(t_s, ATTACH, switch.parent_id, switch.child_id, states[t_s])
            scene, states[t_s] = scene.apply_attachment(event, states[t_s])
            for t in range(t_s + 1, len(states)):
                states[t] = scene.sync(states[t])
            events.append(event)
        self._append(states, events)
        self.scene = scene
        return True

    def _grasp_tool(self, ee, tool_id):
        if self.scene.attached_parent(tool_id) == ee:
            return True
        for held in [c for c, (p, _) in self.scene.attachments.items() if p == ee]:
            self._detach(held)
        contact = self._sample_contact(tool_id, ee, None)
        if contact is None:
            return False
        if not self.solve_sub_path(GRASP_SKELETON, {"manip": ee, "obj": tool_id}, contact):
            return False
        self.metrics.tool_used = tool_id
        logger.info("Grasped tool", extra={"tool": tool_id, "t": self.now})
        return True

    def _sample_contact(self, obj_id, manip_id, direction):
        started = time.perf_counter()
        try:
            return generate_contact_point(
                self.scene, self.config, obj_id, manip_id, self.sampler,
                self.planner_config.max_contact_attempts, self.rng, direction,
                self.planner_config.solver, self.planner_config.margin,
                self.planner_config.constrain_orientation,
                deadline=self.deadline,
            )
        except ContactFailureError as e:
            logger.info("Contact sampling failed", extra={"object": obj_id, "manipulator": manip_id, "attempts": e.attempts})
            return None
        finally:
            self.metrics.cp_seconds += time.perf_counter() - started

    def reach_waypoint(self, waypoint, index, final):
        """
        Moves the target to one waypoint, retrying contacts and manipulators.

        Args:
            waypoint (Pose2): Target pose for this sub-path.
            index (int): Waypoint index, for the report.
            final (bool): Whether this is the last waypoint.

        Returns:
            bool: Whether a feasible sub-path was appended.
        """
        target = self.task.target
        lines_tail = list(self.task.terminal_skeleton) if final else []
        order = self.manipulator_order()
        ee = order[0]
        failure_history: Dict[str, int] = {}

        holder = self.scene.attached_parent(target)
        if self.planner_config.reuse_contact and holder is not None and not self._out_of_time():
            bindings = {"manip": holder, "obj": target, "goal": waypoint}
            if self.solve_sub_path(list(HOLD_SKELETON) + lines_tail, bindings):
                logger.debug("Reused contact", extra={"waypoint": index, "manipulator": holder})
                return True
            failure_history[holder] = 1

        while True:
            if self._out_of_time():
                return False
            try:
                manip_id = self.select_manipulator(failure_history)
            except ManipulatorsExhaustedError as e:
                logger.info("Waypoint failed", extra={"waypoint": index, "error": str(e)})
                return False

            self._detach(target)
            if manip_id == ee:
                for held in [c for c, (p, _) in self.scene.attachments.items() if p == ee]:
                    self._detach(held)
            elif self._out_of_time() or not self._grasp_tool(ee, manip_id):
                failure_history[manip_id] = self.planner_config.j_max
                continue

            pose = self.object_pose()
            direction = np.array([waypoint.x - pose.x, waypoint.y - pose.y])
            contact = self._sample_contact(target, manip_id, direction)
            if contact is None:
                if manip_id == ee:
                    # no reachable boundary point left for the end-effector here
                    failure_history[manip_id] = self.planner_config.j_max
                    continue
                # regrasp at a new point on the next try
                self._detach(manip_id)
            else:
                bindings = {"manip": manip_id, "obj": target, "goal": waypoint}
                if self.solve_sub_path(list(self.task.skeleton_template) + lines_tail, bindings, contact):
                    self.contacts.append(ContactRecord(index, contact))
                    logger.info(
                        "Reached waypoint",
                        extra={"waypoint": index, "manipulator": manip_id, "attempts": failure_history.get(manip_id, 0) + 1},
                    )
                    return True
            failure_history[manip_id] = failure_history.get(manip_id, 0) + 1

    def generate_waypoints(self, spacing):
        started = time.perf_counter()
        try:
            rrt = replace(self.planner_config.rrt, seed=int(self.rng.integers(2 ** 31)))
            raw = plan_object_path(self.scene, self.task.target, self.object_pose(), self.task.goal, rrt)
            smoothed = smooth_path(self.scene, self.task.target, raw, self.planner_config.solver,
                                   self.planner_config.margin)
            waypoints = interpolate_waypoints(smoothed.path, spacing)
        finally:
            self.metrics.rrt_seconds += time.perf_counter() - started
        self.waypoints_used.append(waypoints)
        self.metrics.wp_count = len(waypoints)
        return waypoints, smoothed.path

    def corridor_clearance(self, obstacle_id, path, pose=None):
        """
        Smallest distance between an obstacle and the target swept along a path.
        """
        shape = self.scene.frame(self.task.target).shape
        weight = self.planner_config.rrt.angular_weight or shape.bounding_radius
        dense = densify_path(path, self.planner_config.rrt.resolution, weight)
        obstacle = self.scene.frame(obstacle_id).shape
        pose = pose or self.object_pose(obstacle_id)
        return min(signed_distance(shape, p, obstacle, pose).distance for p in dense)

    def _free_goal_for(self, obstacle_id, path):
        margin = self.planner_config.margin
        shape = self.scene.frame(obstacle_id).shape
        current = self.object_pose(obstacle_id)
        fixtures = self.scene.static_fixtures_for(obstacle_id)
        others = [o for o in self.scene.object_ids if o not in (obstacle_id, self.task.target)]
        poses = self.scene.world_poses(self.config)
        x_min, y_min, x_max, y_max = self.scene.bounds
        step = max(self.planner_config.rrt.step, shape.bounding_radius / 2.0)
        rings = int(math.ceil(max(x_max - x_min, y_max - y_min) / step))
        for ring in range(1, rings + 1):
            for k in range(RING_DIRECTIONS):
                angle = 2.0 * math.pi * k / RING_DIRECTIONS
                candidate = Pose2(current.x + ring * step * math.cos(angle),
                                  current.y + ring * step * math.sin(angle), current.theta)
                if not (x_min <= candidate.x <= x_max and y_min <= candidate.y <= y_max):
                    continue
                if any(signed_distance(shape, candidate, s, p).distance < margin for s, p in fixtures):
                    continue
                if any(signed_distance(shape, candidate, self.scene.frame(o).shape, poses[o]).distance < margin
                       for o in others if self.scene.frame(o).shape is not None):
                    continue
                if self.corridor_clearance(obstacle_id, path, candidate) < 2.0 * margin:
                    continue
                return candidate
        raise ObstacleRemovalError(f"no free pose to clear '{obstacle_id}' from the path")

    def remove_blocking_obstacles(self, object_path):
        """
        Clears movable obstacles from the target's swept corridor with sub-plans.

        Each blocking obstacle is pushed to the nearest free pose outside the corridor
        by a nested planner that runs from the current configuration.

        Args:
            object_path (list): Smoothed target path.

        Returns:
            list: PlanReport of every executed sub-plan.
        """
        margin = self.planner_config.margin
        reports = []
        for obstacle_id in self.task.movable_obstacles:
            if self.scene.attached_parent(obstacle_id) is not None:
                continue
            if self.corridor_clearance(obstacle_id, object_path) >= margin:
                continue
            if self.depth >= MAX_SUB_PLAN_DEPTH:
                raise ObstacleRemovalError(f"obstacle '{obstacle_id}' blocks the path at sub-plan depth {self.depth}")
            goal = self._free_goal_for(obstacle_id, object_path)
            logger.info("Clearing obstacle", extra={"obstacle": obstacle_id, "goal": goal.as_list()})
            self._detach(self.task.target)
            sub_task = Task(obstacle_id, goal, self.task.skeleton_template, (), self.task.tools, ())
            sub_config = replace(self.planner_config, seed=int(self.rng.integers(2 ** 31)))
            sub_planner = HMaPPlanner(self.scene, sub_task, self.config, sub_config, self.depth + 1, True)
            sub_planner.deadline = self.deadline
            report = sub_planner.run()
            reports.append(report)
            self.sub_plans.append(report)
            if not report.feasible:
                raise ObstacleRemovalError(f"sub-plan for '{obstacle_id}' failed: {report.reason}")
            self._append(report.states, report.switches)
            self.scene = report.final_scene
            self.metrics.obstacles_moved.append(obstacle_id)
        return reports

    def _follow(self, waypoints):
        for index in range(1, len(waypoints)):
            if self.goal_reached():
                return True
            if not self.reach_waypoint(waypoints[index], index, index == len(waypoints) - 1):
                return False
        return self.goal_reached()

    def _report(self, feasible, reason=None):
        if feasible and self.release_at_end:
            self._detach(self.task.target)
        return PlanReport(
            feasible=feasible,
            states=list(self.states),
            switches=list(self.switches),
            waypoints_used=list(self.waypoints_used),
            contacts=list(self.contacts),
            metrics=self.metrics,
            sub_plans=list(self.sub_plans),
            reason=reason,
            final_scene=self.scene,
        )

    def run(self):
        """
        Plans until the target is within tolerance of its goal or the budget runs out.

        Returns:
            PlanReport: The plan; infeasible reports keep the longest prefix achieved.
        """
        if self.deadline is None:
            self.deadline = time.perf_counter() + self.planner_config.time_budget
        logger.info("Planning", extra={"target": self.task.target, "goal": self.task.goal.as_list(), "depth": self.depth})
        if self.goal_reached():
            return self._report(True)

        spacing = self.planner_config.spacing
        while True:
            try:
                waypoints, path = self.generate_waypoints(spacing)
            except PlanningFailureError as e:
                logger.warning("No object path", extra={"error": str(e), "nodes": e.node_count})
                return self._report(False, f"object path planning failed: {e}")

            try:
                self.remove_blocking_obstacles(path)
            except (ObstacleRemovalError, SceneError, SkeletonError) as e:
                logger.warning("Obstacle removal failed", extra={"error": str(e)})
                return self._report(False, f"obstacle removal failed: {e}")

            if self._follow(waypoints):
                logger.info("Plan found", extra={"target": self.task.target, "steps": self.now,
                                                 "restarts": self.metrics.restarts})
                return self._report(True)
            if self._out_of_time():
                return self._report(False, "time budget exhausted")

            spacing /= 2.0
            if spacing < self.planner_config.spacing_floor:
                return self._report(False, "node distance fell below its floor")
            self.metrics.restarts += 1
            logger.info("Restarting with a shorter node distance", extra={"spacing": spacing,
                                                                          "restarts": self.metrics.restarts})


def plan(scene, task, config, planner_config=None):
    """
    Plans a manipulation sequence moving the task's target to its goal.

    Args:
        scene (Scene): The scene.
        task (Task): Target, goal and skeleton template.
        config (Configuration): Start configuration.
        planner_config (PlannerConfig, optional): Planner settings.

    Returns:
        PlanReport: The plan and its metrics.
    """
    return HMaPPlanner(scene, task, config, planner_config).run()
