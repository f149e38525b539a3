import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from .geometry import (
    IDENTITY,
    NO_CONTACT,
    Pose2,
    compose,
    relative_pose,
    sample_boundary_point,
    signed_distance,
    transform_point,
)

logger = logging.getLogger(__name__)


class SceneError(ValueError):
    pass


class FrameKind(str, Enum):
    STATIC = "static"
    LINK = "link"
    MOVABLE = "movable"
    TOOL = "tool"


# Which bodies a static fixture blocks
LAYERS = ("all", "ground", "overhead")

ATTACH = "attach"
DETACH = "detach"


@dataclass(frozen=True)
class Joint:
    limits: Tuple[float, float] = (-math.pi, math.pi)

    def __post_init__(self):
        lo, hi = self.limits
        if not lo < hi:
            raise SceneError(f"joint limits must satisfy lo < hi, got {self.limits}")
        object.__setattr__(self, "limits", (float(lo), float(hi)))


@dataclass(frozen=True)
class Frame:
    id: str
    parent: Optional[str] = None
    rel_pose: Pose2 = IDENTITY
    shape: Optional[object] = None
    kind: FrameKind = FrameKind.STATIC
    joint: Optional[Joint] = None
    layer: str = "all"

    @property
    def is_object(self):
        return self.kind in (FrameKind.MOVABLE, FrameKind.TOOL)

    @property
    def moves(self):
        return self.kind != FrameKind.STATIC


@dataclass(frozen=True)
class Configuration:
    q: Tuple[float, ...]
    object_poses: Mapping[str, Pose2] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "q", tuple(float(v) for v in self.q))
        object.__setattr__(self, "object_poses", dict(self.object_poses))

    @property
    def joints(self):
        return np.array(self.q)

    def with_joints(self, q):
        return Configuration(tuple(q), self.object_poses)

    def with_object_pose(self, frame_id, pose):
        poses = dict(self.object_poses)
        poses[frame_id] = pose
        return Configuration(self.q, poses)


@dataclass(frozen=True)
class AttachmentEvent:
    time_index: int
    type: str
    parent_id: str
    child_id: str
    rel_pose: Pose2 = IDENTITY

    def shifted(self, offset):
        return replace(self, time_index=self.time_index + offset)


class Scene:
    """
    Kinematic tree of static fixtures, arm links, movable objects and tools.

    Scenes are immutable: apply_attachment returns a new scene.
    Free object poses live in the Configuration, not the scene.
    """

    def __init__(self, frames, bounds=(-1.5, -1.5, 1.5, 1.5), arms=None, attachments=None):
        self.frames: Dict[str, Frame] = {}
        for frame in frames:
            if frame.id in self.frames or frame.id == "world":
                raise SceneError(f"duplicate frame id '{frame.id}'")
            if frame.parent is not None and frame.parent not in self.frames:
                raise SceneError(f"frame '{frame.id}' references unknown parent '{frame.parent}'")
            if frame.joint is not None and frame.kind != FrameKind.LINK:
                raise SceneError(f"frame '{frame.id}' has a joint but is not a link")
            if frame.is_object and frame.parent is not None:
                raise SceneError(f"object frame '{frame.id}' must be a root frame")
            if frame.kind == FrameKind.STATIC and frame.parent is not None \
                    and self.frames[frame.parent].kind != FrameKind.STATIC:
                raise SceneError(f"static frame '{frame.id}' must hang off static frames")
            if frame.layer not in LAYERS:
                raise SceneError(f"frame '{frame.id}' has unknown layer '{frame.layer}'")
            self.frames[frame.id] = frame

        self.bounds = tuple(float(v) for v in bounds)
        self.arms = {name: list(chain) for name, chain in (arms or {}).items()}
        for name, chain in self.arms.items():
            for frame_id in chain:
                if frame_id not in self.frames:
                    raise SceneError(f"arm '{name}' references unknown frame '{frame_id}'")
        self.attachments: Dict[str, Tuple[str, Pose2]] = dict(attachments or {})

        self.joint_ids = [f.id for f in self.frames.values() if f.joint is not None]
        self._joint_index = {frame_id: i for i, frame_id in enumerate(self.joint_ids)}
        self.object_ids = [f.id for f in self.frames.values() if f.is_object]
        self._candidate_pairs = self._build_candidate_pairs()

    def __repr__(self):
        return f"Scene(frames={list(self.frames)}, attachments={sorted(self.attachments)})"

    @property
    def n_joints(self):
        return len(self.joint_ids)

    @property
    def dim(self):
        return len(self.joint_ids) + 3 * len(self.object_ids)

    def frame(self, frame_id):
        try:
            return self.frames[frame_id]
        except KeyError:
            raise SceneError(f"unknown frame '{frame_id}'") from None

    def joint_index(self, frame_id):
        return self._joint_index[frame_id]

    def object_slice(self, frame_id):
        start = self.n_joints + 3 * self.object_ids.index(frame_id)
        return slice(start, start + 3)

    def attached_parent(self, child_id):
        entry = self.attachments.get(child_id)
        return None if entry is None else entry[0]

    def ancestors(self, frame_id):
        """
        Kinematic ancestors of a frame, nearest first, following attachments.
        """
        chain = []
        current = frame_id
        while True:
            frame = self.frame(current)
            parent = self.attached_parent(current) if frame.is_object else frame.parent
            if parent is None:
                return chain
            chain.append(parent)
            current = parent

    def _build_candidate_pairs(self):
        shaped = [f for f in self.frames.values() if f.shape is not None]
        pairs = []
        for i, a in enumerate(shaped):
            for b in shaped[i + 1:]:
                if not (a.moves or b.moves):
                    continue
                if a.parent == b.id or b.parent == a.id:
                    continue
                if not (_blocks(a, b) and _blocks(b, a)):
                    continue
                pairs.append((a.id, b.id))
        return pairs

    def default_configuration(self):
        q = []
        for frame_id in self.joint_ids:
            lo, hi = self.frames[frame_id].joint.limits
            q.append(min(max(0.0, lo), hi))
        poses = {frame_id: self.frames[frame_id].rel_pose for frame_id in self.object_ids}
        return Configuration(tuple(q), poses)

    def clamp(self, config):
        q = []
        for frame_id, value in zip(self.joint_ids, config.q):
            lo, hi = self.frames[frame_id].joint.limits
            q.append(min(max(value, lo), hi))
        return Configuration(tuple(q), config.object_poses)

    def validate_configuration(self, config):
        if len(config.q) != self.n_joints:
            raise SceneError(f"configuration has {len(config.q)} joints, scene has {self.n_joints}")
        missing = [frame_id for frame_id in self.object_ids if frame_id not in config.object_poses]
        if missing:
            raise SceneError(f"configuration is missing object poses for {missing}")

    def world_poses(self, config):
        """
        World pose of every frame under a configuration.

        Args:
            config (Configuration): Joint angles and free object poses.

        Returns:
            dict: Frame id to world Pose2.
        """
        poses = {}
        for frame_id in self.frames:
            self._resolve(frame_id, config, poses)
        return poses

    def _resolve(self, frame_id, config, poses):
        if frame_id in poses:
            return poses[frame_id]
        frame = self.frame(frame_id)
        if frame.is_object:
            attachment = self.attachments.get(frame_id)
            if attachment is None:
                pose = config.object_poses[frame_id]
            else:
                parent_id, rel = attachment
                pose = compose(self._resolve(parent_id, config, poses), rel)
        else:
            pose = frame.rel_pose
            if frame.parent is not None:
                pose = compose(self._resolve(frame.parent, config, poses), pose)
            if frame.joint is not None:
                pose = compose(pose, Pose2(0.0, 0.0, config.q[self._joint_index[frame_id]]))
        poses[frame_id] = pose
        return pose

    def forward_kinematics(self, config, frame_id):
        self.frame(frame_id)
        return self._resolve(frame_id, config, {})

    def capture_event(self, time_index, event_type, parent_id, child_id, config):
        """
        Builds an AttachmentEvent whose rel_pose is taken from the current world poses.
        """
        rel = relative_pose(
            self.forward_kinematics(config, parent_id),
            self.forward_kinematics(config, child_id),
        )
        return AttachmentEvent(time_index, event_type, parent_id, child_id, rel)

    def apply_attachment(self, event, config):
        """
        Re-parents a child frame at a switch.

        Attach captures the relative pose from the current world poses. Detach returns
        the child to the world at the pose it has under the configuration. Either way
        the child's world pose is continuous across the switch.

        Args:
            event (AttachmentEvent): The switch to apply.
            config (Configuration): Configuration at the switch instant.

        Returns:
            tuple: (Scene, Configuration), the new scene and the configuration with
                every attached or released object's world pose written into it.
        """
        child = self.frame(event.child_id)
        self.frame(event.parent_id)
        if not child.is_object:
            raise SceneError(f"only movable objects and tools can be attached, got '{child.id}'")

        attachments = dict(self.attachments)
        if event.type == ATTACH:
            if event.child_id in attachments:
                raise SceneError(
                    f"'{event.child_id}' is already attached to '{attachments[event.child_id][0]}'"
                )
            if event.child_id in self.ancestors(event.parent_id):
                raise SceneError(f"attaching '{event.child_id}' to '{event.parent_id}' creates a cycle")
            rel = relative_pose(
                self.forward_kinematics(config, event.parent_id),
                self.forward_kinematics(config, event.child_id),
            )
            attachments[event.child_id] = (event.parent_id, rel)
        elif event.type == DETACH:
            current = attachments.get(event.child_id)
            if current is None:
                raise SceneError(f"cannot detach '{event.child_id}': it is not attached")
            if current[0] != event.parent_id:
                raise SceneError(
                    f"cannot detach '{event.child_id}' from '{event.parent_id}': attached to '{current[0]}'"
                )
            del attachments[event.child_id]
        else:
            raise SceneError(f"unknown attachment event type '{event.type}'")

        logger.debug("Applied attachment", extra={"event": event.type, "parent": event.parent_id, "child": event.child_id})
        # the released child keeps the world pose it had while attached
        return Scene(self.frames.values(), self.bounds, self.arms, attachments), self.sync(config)

    def sync(self, config):
        """
        Writes the world pose of every attached object into the configuration.
        """
        if not self.attachments:
            return config
        poses = dict(config.object_poses)
        world = {}
        for child_id in self.attachments:
            poses[child_id] = self._resolve(child_id, config, world)
        return Configuration(config.q, poses)

    def pack(self, config):
        values = list(config.q)
        for frame_id in self.object_ids:
            pose = config.object_poses[frame_id]
            values.extend((pose.x, pose.y, pose.theta))
        return np.array(values, dtype=float)

    def unpack(self, vector):
        n = self.n_joints
        poses = {}
        for i, frame_id in enumerate(self.object_ids):
            start = n + 3 * i
            poses[frame_id] = Pose2(vector[start], vector[start + 1], vector[start + 2])
        return Configuration(tuple(vector[:n]), poses)

    def collision_pairs(self, ignore_pairs=()):
        ignored = {frozenset(pair) for pair in ignore_pairs}
        for child_id, (parent_id, _) in self.attachments.items():
            ignored.add(frozenset((child_id, parent_id)))
            grandparent = self.frame(parent_id).parent if not self.frame(parent_id).is_object \
                else self.attached_parent(parent_id)
            if grandparent is not None:
                ignored.add(frozenset((child_id, grandparent)))
        return [pair for pair in self._candidate_pairs if frozenset(pair) not in ignored]

    def scene_min_distance(self, config, ignore_pairs=(), poses=None):
        """
        Minimum signed distance over all non-ignored shape pairs.

        Adjacent links and attached parent/child pairs are ignored automatically.

        Args:
            config (Configuration): Configuration to check.
            ignore_pairs (iterable): Extra (id_a, id_b) pairs to skip.
            poses (dict, optional): Precomputed world poses.

        Returns:
            DistanceResult: The closest pair, or an infinite-distance sentinel.
        """
        poses = poses if poses is not None else self.world_poses(config)
        best = NO_CONTACT
        for id_a, id_b in self.collision_pairs(ignore_pairs):
            shape_a = self.frames[id_a].shape
            shape_b = self.frames[id_b].shape
            pose_a = poses[id_a]
            pose_b = poses[id_b]
            lower_bound = math.hypot(pose_b.x - pose_a.x, pose_b.y - pose_a.y) \
                - shape_a.bounding_radius - shape_b.bounding_radius
            if lower_bound >= best.distance:
                continue
            result = signed_distance(shape_a, pose_a, shape_b, pose_b)
            if result.distance < best.distance:
                best = replace(result, pair=(id_a, id_b))
        return best

    def pair_distance(self, config, id_a, id_b, poses=None):
        poses = poses if poses is not None else self.world_poses(config)
        shape_a = self.frame(id_a).shape
        shape_b = self.frame(id_b).shape
        if shape_a is None or shape_b is None:
            raise SceneError(f"distance between '{id_a}' and '{id_b}' needs both frames to have shapes")
        return replace(signed_distance(shape_a, poses[id_a], shape_b, poses[id_b]), pair=(id_a, id_b))

    def point_cloud(self, config, frame_id, count, seed=0):
        """
        Points on the boundary of a frame's shape at its world pose.

        Args:
            config (Configuration): Configuration to place the frame.
            frame_id (str): Frame to sample.
            count (int): Number of points.
            seed (int): Random seed for the boundary parameters.

        Returns:
            np.ndarray: (count, 2) world points.
        """
        shape = self.frame(frame_id).shape
        if shape is None:
            raise SceneError(f"frame '{frame_id}' has no shape to sample")
        pose = self.forward_kinematics(config, frame_id)
        rng = np.random.default_rng(seed)
        return np.array([transform_point(pose, sample_boundary_point(shape, u)) for u in rng.random(count)])

    def arm_for(self, frame_id):
        for name, chain in self.arms.items():
            if frame_id in chain:
                return name
        return None

    def reach(self, arm):
        """
        Upper bound on the distance from the arm base to any point of its last frame's shape.
        """
        chain = self.arms[arm]
        total = 0.0
        for frame_id in chain[1:]:
            pose = self.frames[frame_id].rel_pose
            total += math.hypot(pose.x, pose.y)
        last = self.frames[chain[-1]]
        if last.shape is not None:
            total += last.shape.bounding_radius
        return total

    def arm_base(self, arm, config):
        first = self.frames[self.arms[arm][0]]
        if first.parent is None:
            return first.rel_pose.position
        return compose(self.forward_kinematics(config, first.parent), first.rel_pose).position

    def object_subscene(self, obj_id):
        """
        Scene holding only the object and the fixtures that block it.
        """
        obj = self.frame(obj_id)
        frames = [
            f for f in self.frames.values()
            if f.kind == FrameKind.STATIC and f.shape is not None and _blocks(f, obj)
        ]
        frames = [replace(f, parent=None, rel_pose=self._static_world_pose(f.id)) for f in frames]
        frames.append(replace(obj, parent=None))
        return Scene(frames, self.bounds)

    def _static_world_pose(self, frame_id):
        frame = self.frames[frame_id]
        if frame.parent is None:
            return frame.rel_pose
        return compose(self._static_world_pose(frame.parent), frame.rel_pose)

    def static_fixtures_for(self, obj_id):
        obj = self.frame(obj_id)
        return [
            (f.shape, self._static_world_pose(f.id)) for f in self.frames.values()
            if f.kind == FrameKind.STATIC and f.shape is not None and _blocks(f, obj)
        ]


def _blocks(fixture, other):
    """
    Whether a fixture's layer lets it collide with another frame.
    """
    if fixture.kind != FrameKind.STATIC or fixture.layer == "all":
        return True
    if fixture.layer == "ground":
        return other.kind in (FrameKind.MOVABLE, FrameKind.TOOL, FrameKind.STATIC)
    return other.kind in (FrameKind.LINK, FrameKind.STATIC)
