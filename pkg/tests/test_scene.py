import math
import os
import sys
import unittest

import numpy as np

# Make sure that "src" is known and can be used to import the planner modules
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src")))
from src import geometry
from src.geometry import Box, Circle, Pose2
from src.scene import ATTACH, DETACH, AttachmentEvent, Configuration, Frame, FrameKind, Joint, Scene, SceneError


def two_link_arm(extra=()):
    frames = [
        Frame("link1", kind=FrameKind.LINK, joint=Joint()),
        Frame("link2", parent="link1", rel_pose=Pose2(1.0, 0.0, 0.0), kind=FrameKind.LINK, joint=Joint()),
        Frame("ee", parent="link2", rel_pose=Pose2(1.0, 0.0, 0.0), kind=FrameKind.LINK, shape=Circle(0.05)),
    ]
    return Scene(frames + list(extra), bounds=(-3, -3, 3, 3), arms={"arm": ["link1", "link2", "ee"]})


def assert_pose_close(test, a, b, places=12):
    test.assertAlmostEqual(a.x, b.x, places=places)
    test.assertAlmostEqual(a.y, b.y, places=places)
    test.assertAlmostEqual(a.theta, b.theta, places=places)


class TestSceneConstruction(unittest.TestCase):
    def test_duplicate_ids_rejected(self):
        with self.assertRaises(SceneError):
            Scene([Frame("a"), Frame("a")])

    def test_unknown_parent_rejected(self):
        with self.assertRaises(SceneError):
            Scene([Frame("a", parent="missing")])

    def test_joint_only_on_links(self):
        with self.assertRaises(SceneError):
            Scene([Frame("a", kind=FrameKind.STATIC, joint=Joint())])

    def test_joint_limits_ordered(self):
        with self.assertRaises(SceneError):
            Joint((1.0, -1.0))

    def test_objects_are_roots(self):
        with self.assertRaises(SceneError):
            Scene([Frame("a"), Frame("box", parent="a", kind=FrameKind.MOVABLE, shape=Circle(0.1))])

    def test_unknown_layer_rejected(self):
        with self.assertRaises(SceneError):
            Scene([Frame("wall", shape=Circle(0.1), layer="ceiling")])

    def test_default_configuration_and_dim(self):
        scene = two_link_arm([Frame("puck", rel_pose=Pose2(1, 1, 0), kind=FrameKind.MOVABLE, shape=Circle(0.1))])
        config = scene.default_configuration()
        self.assertEqual(config.q, (0.0, 0.0))
        self.assertEqual(config.object_poses["puck"], Pose2(1, 1, 0))
        self.assertEqual(scene.dim, 5)
        scene.validate_configuration(config)
        with self.assertRaises(SceneError):
            scene.validate_configuration(Configuration((0.0,), config.object_poses))

    def test_clamp_to_limits(self):
        scene = Scene([Frame("link1", kind=FrameKind.LINK, joint=Joint((-1.0, 1.0)))])
        self.assertEqual(scene.clamp(Configuration((2.5,))).q, (1.0,))


class TestForwardKinematics(unittest.TestCase):
    def test_single_link_identity(self):
        scene = Scene([Frame("link1", kind=FrameKind.LINK, joint=Joint())])
        pose = scene.forward_kinematics(Configuration((0.0,)), "link1")
        self.assertEqual(pose, Pose2())

    def test_two_link_arm_quarter_turn(self):
        scene = two_link_arm()
        pose = scene.forward_kinematics(Configuration((math.pi / 2, 0.0)), "ee")
        self.assertAlmostEqual(pose.x, 0.0, places=12)
        self.assertAlmostEqual(pose.y, 2.0, places=12)

    def test_unknown_frame(self):
        with self.assertRaises(SceneError):
            two_link_arm().forward_kinematics(Configuration((0.0, 0.0)), "nope")

    def test_attached_object_follows_parent(self):
        scene = two_link_arm([Frame("puck", kind=FrameKind.MOVABLE, shape=Circle(0.05))])
        config = Configuration((0.3, -0.2), {"puck": Pose2()})
        scene.attachments["puck"] = ("ee", Pose2(0.1, 0.0, 0.0))
        expected = geometry.compose(scene.forward_kinematics(config, "ee"), Pose2(0.1, 0.0, 0.0))
        assert_pose_close(self, scene.forward_kinematics(config, "puck"), expected)

    def test_joint_jacobian_consistent_across_steps(self):
        scene = two_link_arm()
        q = np.array([0.4, -1.1])

        def ee(values):
            return scene.forward_kinematics(Configuration(tuple(values)), "ee").position

        def fd(step):
            columns = []
            for i in range(2):
                delta = np.zeros(2)
                delta[i] = step
                columns.append((ee(q + delta) - ee(q - delta)) / (2 * step))
            return np.stack(columns, axis=1)

        coarse, fine = fd(1e-5), fd(1e-7)
        self.assertLess(np.linalg.norm(coarse - fine) / np.linalg.norm(fine), 1e-3)


class TestAttachments(unittest.TestCase):
    def setUp(self):
        self.scene = two_link_arm([Frame("puck", kind=FrameKind.MOVABLE, shape=Circle(0.05))])
        self.config = Configuration((0.5, 0.4), {"puck": Pose2(1.5, 1.2, 0.3)})

    def test_attach_keeps_child_pose(self):
        event = AttachmentEvent(1, ATTACH, "ee", "puck")
        attached, _ = self.scene.apply_attachment(event, self.config)
        assert_pose_close(self, attached.forward_kinematics(self.config, "puck"), self.config.object_poses["puck"])
        self.assertEqual(self.scene.attachments, {})

    def test_attached_child_moves_rigidly(self):
        attached, _ = self.scene.apply_attachment(AttachmentEvent(1, ATTACH, "ee", "puck"), self.config)
        moved = self.config.with_joints((0.9, 0.4))
        before = geometry.relative_pose(
            attached.forward_kinematics(self.config, "ee"), attached.forward_kinematics(self.config, "puck")
        )
        after = geometry.relative_pose(
            attached.forward_kinematics(moved, "ee"), attached.forward_kinematics(moved, "puck")
        )
        assert_pose_close(self, before, after)
        rotated = attached.forward_kinematics(moved, "puck")
        self.assertGreater(abs(rotated.x - 1.5) + abs(rotated.y - 1.2), 1e-3)

    def test_attach_detach_attach_sequence_is_continuous(self):
        scene, config = self.scene, self.config
        for step, (kind, q) in enumerate([(ATTACH, (0.2, 0.1)), (DETACH, (-0.4, 0.6)), (ATTACH, (1.0, -0.3))]):
            before = scene.forward_kinematics(config, "puck")
            scene, config = scene.apply_attachment(AttachmentEvent(step, kind, "ee", "puck"), config)
            assert_pose_close(self, scene.forward_kinematics(config, "puck"), before)
            config = scene.sync(config.with_joints(q))

    def test_detach_keeps_world_pose_of_unsynced_child(self):
        scene = Scene([
            Frame("link1", kind=FrameKind.LINK, joint=Joint()),
            Frame("puck", kind=FrameKind.MOVABLE, rel_pose=Pose2(1.0, 0.0, 0.0), shape=Circle(0.05)),
        ])
        config = scene.default_configuration()
        attached, config = scene.apply_attachment(AttachmentEvent(1, ATTACH, "link1", "puck"), config)
        # the joint moves but the stored puck pose is left stale
        moved = config.with_joints((1.0,))
        before = attached.forward_kinematics(moved, "puck")
        self.assertAlmostEqual(before.x, math.cos(1.0), places=12)
        released, released_config = attached.apply_attachment(AttachmentEvent(2, DETACH, "link1", "puck"), moved)
        self.assertEqual(released.attachments, {})
        assert_pose_close(self, released.forward_kinematics(released_config, "puck"), before)
        assert_pose_close(self, released_config.object_poses["puck"], before)
        self.assertEqual(released_config.q, (1.0,))

    def test_double_attach_rejected(self):
        attached, _ = self.scene.apply_attachment(AttachmentEvent(1, ATTACH, "ee", "puck"), self.config)
        with self.assertRaises(SceneError):
            attached.apply_attachment(AttachmentEvent(2, ATTACH, "link2", "puck"), self.config)

    def test_detach_unattached_rejected(self):
        with self.assertRaises(SceneError):
            self.scene.apply_attachment(AttachmentEvent(1, DETACH, "ee", "puck"), self.config)

    def test_links_cannot_be_attached(self):
        with self.assertRaises(SceneError):
            self.scene.apply_attachment(AttachmentEvent(1, ATTACH, "puck", "ee"), self.config)

    def test_capture_event_records_relative_pose(self):
        event = self.scene.capture_event(3, ATTACH, "ee", "puck", self.config)
        expected = geometry.relative_pose(
            self.scene.forward_kinematics(self.config, "ee"), self.config.object_poses["puck"]
        )
        self.assertEqual(event.time_index, 3)
        assert_pose_close(self, event.rel_pose, expected)
        self.assertEqual(event.shifted(2).time_index, 5)

    def test_sync_writes_attached_pose(self):
        attached, _ = self.scene.apply_attachment(AttachmentEvent(1, ATTACH, "ee", "puck"), self.config)
        moved = attached.sync(self.config.with_joints((0.0, 0.0)))
        assert_pose_close(self, moved.object_poses["puck"], attached.forward_kinematics(moved, "puck"))

    def test_attached_pair_ignored_for_collision(self):
        touching = Configuration((0.0, 0.0), {"puck": Pose2(2.05, 0.0, 0.0)})
        self.assertIn(("ee", "puck"), self.scene.collision_pairs())
        attached, _ = self.scene.apply_attachment(AttachmentEvent(1, ATTACH, "ee", "puck"), touching)
        self.assertNotIn(("ee", "puck"), attached.collision_pairs())


class TestDistances(unittest.TestCase):
    def test_empty_scene_is_infinite(self):
        scene = Scene([Frame("link1", kind=FrameKind.LINK, joint=Joint())])
        self.assertEqual(scene.scene_min_distance(Configuration((0.0,))).distance, math.inf)

    def test_two_circles_match_geometry(self):
        scene = Scene([
            Frame("a", kind=FrameKind.MOVABLE, rel_pose=Pose2(0, 0, 0), shape=Circle(0.2)),
            Frame("b", kind=FrameKind.MOVABLE, rel_pose=Pose2(1, 0, 0), shape=Circle(0.3)),
        ])
        result = scene.scene_min_distance(scene.default_configuration())
        expected = geometry.signed_distance(Circle(0.2), Pose2(0, 0, 0), Circle(0.3), Pose2(1, 0, 0))
        self.assertAlmostEqual(result.distance, expected.distance)
        self.assertEqual(result.pair, ("a", "b"))

    def test_static_pairs_are_not_checked(self):
        scene = Scene([Frame("w1", shape=Box((1, 1))), Frame("w2", shape=Box((1, 1)))])
        self.assertEqual(scene.collision_pairs(), [])

    def test_matches_brute_force_in_tunnel(self):
        walls = [
            Frame("wall_low", rel_pose=Pose2(1.2, -0.3, 0), shape=Box((0.4, 0.05))),
            Frame("wall_high", rel_pose=Pose2(1.2, 0.3, 0), shape=Box((0.4, 0.05))),
            Frame("puck", kind=FrameKind.MOVABLE, rel_pose=Pose2(1.4, 0.0, 0), shape=Circle(0.1)),
        ]
        scene = two_link_arm(walls)
        rng = np.random.default_rng(7)
        for _ in range(5):
            config = Configuration(tuple(rng.uniform(-0.6, 0.6, 2)), {"puck": Pose2(1.4, 0.0, 0)})
            poses = scene.world_poses(config)
            brute = min(
                geometry.signed_distance(scene.frames[a].shape, poses[a], scene.frames[b].shape, poses[b]).distance
                for a, b in scene.collision_pairs()
            )
            self.assertAlmostEqual(scene.scene_min_distance(config).distance, brute, places=12)

    def test_ignore_pairs(self):
        scene = Scene([
            Frame("a", kind=FrameKind.MOVABLE, rel_pose=Pose2(0, 0, 0), shape=Circle(0.2)),
            Frame("b", kind=FrameKind.MOVABLE, rel_pose=Pose2(0.3, 0, 0), shape=Circle(0.2)),
        ])
        self.assertEqual(scene.scene_min_distance(scene.default_configuration(), [("b", "a")]).distance, math.inf)

    def test_collision_layers(self):
        scene = two_link_arm([
            Frame("curb", rel_pose=Pose2(2.0, 0.0, 0.0), shape=Box((0.1, 0.1)), layer="ground"),
            Frame("roof", rel_pose=Pose2(-2.0, 0.0, 0.0), shape=Box((0.1, 0.1)), layer="overhead"),
            Frame("puck", kind=FrameKind.MOVABLE, rel_pose=Pose2(0, 2, 0), shape=Circle(0.1)),
        ])
        pairs = scene.collision_pairs()
        self.assertNotIn(("ee", "curb"), pairs)
        self.assertIn(("curb", "puck"), pairs)
        self.assertIn(("ee", "roof"), pairs)
        self.assertNotIn(("roof", "puck"), pairs)

    def test_pair_distance_needs_shapes(self):
        scene = two_link_arm()
        with self.assertRaises(SceneError):
            scene.pair_distance(Configuration((0.0, 0.0)), "link1", "ee")


class TestPointCloudAndPacking(unittest.TestCase):
    def test_unit_circle_points(self):
        scene = Scene([Frame("disc", kind=FrameKind.MOVABLE, shape=Circle(1.0))])
        points = scene.point_cloud(scene.default_configuration(), "disc", 4, seed=1)
        self.assertEqual(points.shape, (4, 2))
        np.testing.assert_allclose(np.hypot(points[:, 0], points[:, 1]), 1.0)

    def test_translated_circle_points(self):
        scene = Scene([Frame("disc", kind=FrameKind.MOVABLE, shape=Circle(1.0))])
        origin = scene.point_cloud(scene.default_configuration(), "disc", 4, seed=1)
        moved = scene.point_cloud(Configuration((), {"disc": Pose2(5, 0, 0)}), "disc", 4, seed=1)
        np.testing.assert_allclose(moved, origin + np.array([5.0, 0.0]), atol=1e-12)

    def test_box_points_on_boundary(self):
        scene = Scene([Frame("crate", kind=FrameKind.MOVABLE, shape=Box((0.3, 0.1)))])
        pose = Pose2(0.4, -0.7, 1.1)
        points = scene.point_cloud(Configuration((), {"crate": pose}), "crate", 50, seed=3)
        for point in points:
            self.assertLess(abs(geometry.point_signed_distance(Box((0.3, 0.1)), pose, point)), 1e-9)

    def test_point_cloud_needs_shape(self):
        scene = Scene([Frame("link1", kind=FrameKind.LINK, joint=Joint())])
        with self.assertRaises(SceneError):
            scene.point_cloud(Configuration((0.0,)), "link1", 3)

    def test_pack_unpack_round_trip(self):
        scene = two_link_arm([Frame("puck", kind=FrameKind.MOVABLE, shape=Circle(0.05))])
        config = Configuration((0.2, -0.7), {"puck": Pose2(0.3, 0.4, -1.0)})
        vector = scene.pack(config)
        np.testing.assert_allclose(vector, [0.2, -0.7, 0.3, 0.4, -1.0])
        self.assertEqual(scene.unpack(vector), config)

    def test_reach(self):
        scene = two_link_arm()
        self.assertAlmostEqual(scene.reach("arm"), 2.05)
        np.testing.assert_allclose(scene.arm_base("arm", Configuration((0.0, 0.0))), [0.0, 0.0])


if __name__ == "__main__":
    unittest.main()
