import os
import sys
import unittest
from dataclasses import replace

# Make sure that "src" is known and can be used to import the planner modules
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src")))
from src import replay
from src.formats import PlanDocument
from src.geometry import Circle, Pose2
from src.scene import ATTACH, DETACH, AttachmentEvent, Frame, FrameKind, Joint, Scene, SceneError


def arm_scene():
    return Scene(
        [
            Frame("link1", kind=FrameKind.LINK, joint=Joint()),
            Frame("link2", parent="link1", rel_pose=Pose2(1.0, 0.0, 0.0), kind=FrameKind.LINK, joint=Joint()),
            Frame("ee", parent="link2", rel_pose=Pose2(1.0, 0.0, 0.0), kind=FrameKind.LINK, shape=Circle(0.05)),
            Frame("puck", kind=FrameKind.MOVABLE, rel_pose=Pose2(1.5, 0.5, 0.0), shape=Circle(0.1)),
        ],
        bounds=(-3, -3, 3, 3),
        arms={"arm": ["link1", "link2", "ee"]},
    )


def document(scene, states, switches=(), feasible=False, goal=Pose2(), waypoints=(), spacing=None):
    return PlanDocument(
        feasible=feasible,
        target="puck",
        goal=goal,
        tolerance=[0.02, 0.1],
        frame_ids=list(scene.frames),
        object_ids=list(scene.object_ids),
        states=list(states),
        switches=list(switches),
        contacts=[],
        waypoints=list(waypoints),
        spacing=spacing,
        metrics={},
    )


def sweep(scene, joints):
    config = scene.default_configuration()
    return [config.with_joints(q) for q in joints]


def carry(scene):
    """
    Arm grabs the puck at t=1, swings it, and lets go at t=3.
    """
    states = sweep(scene, [(0.0, 0.0), (0.0, 0.0), (0.2, 0.0), (0.3, 0.0), (0.1, 0.0)])
    attach = scene.capture_event(1, ATTACH, "ee", "puck", states[1])
    holding, _ = scene.apply_attachment(attach, states[1])
    for t in (2, 3):
        states[t] = holding.sync(states[t])
    states[4] = states[4].with_object_pose("puck", states[3].object_poses["puck"])
    detach = AttachmentEvent(3, DETACH, "ee", "puck", attach.rel_pose)
    return states, [attach, detach]


class TestCheckPlan(unittest.TestCase):
    def setUp(self):
        self.scene = arm_scene()

    def test_clean_motion(self):
        doc = document(self.scene, sweep(self.scene, [(0.0, 0.0), (0.1, 0.0), (0.2, -0.1)]))
        self.assertEqual(replay.check_plan(self.scene, doc), [])
        self.assertEqual(replay.format_violations([]), "no violations")

    def test_carried_object(self):
        states, switches = carry(self.scene)
        final = states[-1].object_poses["puck"]
        doc = document(self.scene, states, switches, feasible=True, goal=final)
        self.assertEqual(replay.check_plan(self.scene, doc), [])

    def test_free_object_must_not_move(self):
        states = sweep(self.scene, [(0.0, 0.0), (0.1, 0.0)])
        states[1] = states[1].with_object_pose("puck", Pose2(1.5, 0.6, 0.0))
        violations = replay.check_plan(self.scene, document(self.scene, states))
        self.assertEqual([(v.kind, v.t) for v in violations], [("object_motion", 1)])
        self.assertAlmostEqual(violations[0].value, 0.1)

    def test_tampered_attachment(self):
        states, switches = carry(self.scene)
        switches[0] = replace(switches[0], rel_pose=Pose2(0.5, 0.0, 0.0))
        violations = replay.check_plan(self.scene, document(self.scene, states, switches))
        self.assertEqual([(v.kind, v.t) for v in violations], [("switch", 1)])

    def test_carried_object_drifting(self):
        states, switches = carry(self.scene)
        pose = states[2].object_poses["puck"]
        states[2] = states[2].with_object_pose("puck", Pose2(pose.x + 0.05, pose.y, pose.theta))
        violations = replay.check_plan(self.scene, document(self.scene, states, switches))
        self.assertEqual([(v.kind, v.t) for v in violations], [("attachment_drift", 2)])
        self.assertAlmostEqual(violations[0].value, 0.05)

    def test_collision(self):
        states = sweep(self.scene, [(0.0, 0.0)])
        states[0] = states[0].with_object_pose("puck", Pose2(2.0, 0.05, 0.0))
        violations = replay.check_plan(self.scene, document(self.scene, states))
        self.assertEqual(violations[0].kind, "collision")
        self.assertLess(violations[0].value, 0.0)
        self.assertIn("puck", violations[0].detail)

    def test_joint_limit(self):
        states = sweep(self.scene, [(0.0, 0.0), (0.0, 3.5)])
        violations = replay.check_plan(self.scene, document(self.scene, states))
        self.assertEqual([(v.kind, v.detail) for v in violations], [("joint_limit", "link2")])

    def test_waypoint_spacing(self):
        doc = document(self.scene, sweep(self.scene, [(0.0, 0.0)]),
                       waypoints=[Pose2(0, 0, 0), Pose2(0.2, 0, 0), Pose2(1.0, 0, 0)], spacing=0.5)
        violations = replay.check_plan(self.scene, doc)
        self.assertEqual([(v.kind, v.t) for v in violations], [("waypoint_spacing", 2)])

    def test_goal_not_reached(self):
        doc = document(self.scene, sweep(self.scene, [(0.0, 0.0)]), feasible=True, goal=Pose2(0.0, 1.0, 0.0))
        violations = replay.check_plan(self.scene, doc)
        self.assertEqual(violations[0].kind, "goal")
        self.assertIn("goal", replay.format_violations(violations))

    def test_scene_mismatch(self):
        doc = document(self.scene, sweep(self.scene, [(0.0, 0.0)]))
        doc.frame_ids = ["link1", "ee"]
        with self.assertRaises(SceneError):
            replay.check_plan(self.scene, doc)

    def test_wrong_joint_count(self):
        doc = document(self.scene, [self.scene.default_configuration().with_joints((0.0,))])
        with self.assertRaises(SceneError):
            replay.check_plan(self.scene, doc)


if __name__ == "__main__":
    unittest.main()
