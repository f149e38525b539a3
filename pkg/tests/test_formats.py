import json
import os
import sys
import tempfile
import unittest

# Make sure that "src" is known and can be used to import the planner modules
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src")))
from src import formats
from src.contact import ContactPoint
from src.geometry import Box, Pose2
from src.planner import ContactRecord, PlanMetrics, PlanReport
from src.scene import ATTACH, AttachmentEvent
from src.waypoints import WaypointList

TASKS_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "tasks"))

SCENE = {
    "bounds": [-2.0, -2.0, 2.0, 2.0],
    "arms": {"arm": ["link1", "ee"]},
    "init": {"q": [0.3]},
    "frames": [
        {"id": "link1", "kind": "link", "joint": {"limits": [-2.0, 2.0]}},
        {"id": "ee", "kind": "link", "parent": "link1", "rel_pose": [1.0, 0.0, 0.0],
         "shape": {"type": "circle", "radius": 0.05}},
        {"id": "crate", "kind": "movable", "rel_pose": [0.5, 0.5, 0.0],
         "shape": {"type": "box", "half_extents": [0.1, 0.1]}},
        {"id": "wedge", "kind": "tool", "rel_pose": [-0.5, 0.5, 0.0],
         "shape": {"type": "polygon", "vertices": [[0, 0], [0.2, 0], [0, 0.1]]}},
    ],
}


def scene_data(**changes):
    data = json.loads(json.dumps(SCENE))
    data.update(changes)
    return data


def build_scene():
    (scene, config), error_message = formats.validate_scene(scene_data())
    assert error_message is None, error_message
    return scene, config


class TestValidateScene(unittest.TestCase):
    def test_valid_scene(self):
        scene, config = build_scene()
        self.assertEqual(list(scene.frames), ["link1", "ee", "crate", "wedge"])
        self.assertEqual(config.q, (0.3,))
        self.assertEqual(config.object_poses["crate"], Pose2(0.5, 0.5, 0.0))
        self.assertEqual(scene.bounds, (-2.0, -2.0, 2.0, 2.0))

    def test_init_is_clamped(self):
        (_, config), _ = formats.validate_scene(scene_data(init={"q": [5.0]}))
        self.assertEqual(config.q, (2.0,))

    def test_errors(self):
        cases = {
            "not a dict": [],
            "no frames": scene_data(frames=[]),
            "missing id": scene_data(frames=[{"kind": "static"}]),
            "bad shape": scene_data(frames=[{"id": "a", "shape": {"type": "star"}}]),
            "bad kind": scene_data(frames=[{"id": "a", "kind": "ghost"}]),
            "bad radius": scene_data(frames=[{"id": "a", "shape": {"type": "circle", "radius": -1}}]),
            "bad bounds": scene_data(bounds=[1.0, 1.0, 0.0, 0.0]),
            "init length": scene_data(init={"q": [0.0, 0.0]}),
            "bad pose": scene_data(frames=[{"id": "a", "rel_pose": [0.0, 1.0]}]),
        }
        for name, data in cases.items():
            result, error_message = formats.validate_scene(data)
            self.assertIsNone(result, name)
            self.assertIsInstance(error_message, str, name)

    def test_unknown_parent_names_frame(self):
        frames = SCENE["frames"] + [{"id": "lid", "kind": "static", "parent": "cupboard"}]
        result, error_message = formats.validate_scene(scene_data(frames=frames))
        self.assertIsNone(result)
        self.assertIn("'lid'", error_message)
        self.assertIn("'cupboard'", error_message)

    def test_scene_to_dict_reloads(self):
        scene, config = build_scene()
        (again, again_config), error_message = formats.validate_scene(formats.scene_to_dict(scene, config))
        self.assertIsNone(error_message)
        self.assertEqual(list(again.frames), list(scene.frames))
        self.assertEqual(again_config.q, config.q)
        self.assertIsInstance(again.frame("crate").shape, Box)


class TestValidateTask(unittest.TestCase):
    def setUp(self):
        self.scene, _ = build_scene()

    def test_minimal_task(self):
        spec, error_message = formats.validate_task({"target": "crate", "goal": [0.5, -0.5, 0.0]}, self.scene)
        self.assertIsNone(error_message)
        self.assertEqual(spec.task.goal, Pose2(0.5, -0.5, 0.0))
        self.assertEqual(spec.sampler, "heuristic")
        self.assertEqual(spec.planner_config.spacing, 0.25)

    def test_overrides(self):
        data = {
            "target": "crate",
            "goal": [0.5, -0.5, 0.0],
            "tolerance": [0.05, 0.2],
            "tools": ["wedge"],
            "sampler": "pointcloud",
            "planner": {"spacing": 0.1, "rrt": {"step": 0.02, "goal_tolerance": [0.01, 0.05]}, "solver": {"max_outer": 5}},
        }
        spec, error_message = formats.validate_task(data, self.scene)
        self.assertIsNone(error_message)
        config = spec.planner_config
        self.assertEqual((config.tau_pos, config.tau_ang), (0.05, 0.2))
        self.assertEqual(config.spacing, 0.1)
        self.assertEqual(config.rrt.goal_tolerance, (0.01, 0.05))
        self.assertEqual(config.solver.max_outer, 5)
        self.assertEqual(spec.task.tools, ("wedge",))
        self.assertEqual(spec.sampler, "pointcloud")

    def test_file_sampler_resolves_against_base_dir(self):
        data = {"target": "crate", "goal": [0, 0, 0], "sampler": {"file": "candidates.txt"}}
        spec, error_message = formats.validate_task(data, self.scene, TASKS_DIR)
        self.assertIsNone(error_message)
        self.assertEqual(spec.sampler, "file:candidates.txt")

    def test_errors(self):
        cases = {
            "missing goal": {"target": "crate"},
            "unknown target": {"target": "barrel", "goal": [0, 0, 0]},
            "static target": {"target": "link1", "goal": [0, 0, 0]},
            "bad goal": {"target": "crate", "goal": [0, 0]},
            "bad skeleton": {"target": "crate", "goal": [0, 0, 0], "skeleton": ["touch ee crate"]},
            "unknown setting": {"target": "crate", "goal": [0, 0, 0], "planner": {"speed": 3}},
            "unknown rrt setting": {"target": "crate", "goal": [0, 0, 0], "planner": {"rrt": {"fast": True}}},
            "bad spacing": {"target": "crate", "goal": [0, 0, 0], "planner": {"spacing": 0.01}},
            "unknown sampler": {"target": "crate", "goal": [0, 0, 0], "sampler": "oracle"},
            "missing file": {"target": "crate", "goal": [0, 0, 0], "sampler": {"file": "/nonexistent/c.txt"}},
            "unknown manipulator": {"target": "crate", "goal": [0, 0, 0], "planner": {"manipulator_order": ["claw"]}},
        }
        for name, data in cases.items():
            spec, error_message = formats.validate_task(data, self.scene)
            self.assertIsNone(spec, name)
            self.assertIsInstance(error_message, str, name)


class TestBundledTasks(unittest.TestCase):
    def test_suite_entries_load(self):
        with open(os.path.join(TASKS_DIR, "suite.json"), "r") as f:
            suite = json.load(f)
        self.assertEqual(len(suite["tasks"]), 6)
        for entry in suite["tasks"]:
            result, error_message = formats.load_scene(os.path.join(TASKS_DIR, entry["scene"]))
            self.assertIsNone(error_message, entry["name"])
            scene, config = result
            spec, error_message = formats.load_task(os.path.join(TASKS_DIR, entry["task"]), scene)
            self.assertIsNone(error_message, entry["name"])
            self.assertGreater(scene.scene_min_distance(config).distance, 0.0, entry["name"])

    def test_missing_and_malformed_files(self):
        _, error_message = formats.load_json("/nonexistent/scene.json")
        self.assertIn("Cannot read", error_message)
        with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
            f.write("{not json")
        self.addCleanup(os.remove, f.name)
        _, error_message = formats.load_scene(f.name)
        self.assertIn("Malformed JSON", error_message)


def sample_report(scene, config):
    attached = scene.capture_event(1, ATTACH, "ee", "crate", config)
    contact = ContactPoint.from_parameter(scene, config, "crate", 0.5, "heuristic", manipulator="ee")
    metrics = PlanMetrics(wp_count=2, rrt_seconds=0.5, cp_seconds=0.25, komo_seconds=1.0, optimizer_calls=3)
    return PlanReport(
        feasible=True,
        states=[config, config, config.with_object_pose("crate", Pose2(0.5, 0.3, 0.1))],
        switches=[attached],
        waypoints_used=[WaypointList([Pose2(0.5, 0.5, 0.0), Pose2(0.5, 0.3, 0.1)], 0.25, 0.2)],
        contacts=[ContactRecord(1, contact)],
        metrics=metrics,
    )


class TestPlanDocument(unittest.TestCase):
    def setUp(self):
        self.scene, self.config = build_scene()
        spec, _ = formats.validate_task({"target": "crate", "goal": [0.5, 0.3, 0.1]}, self.scene)
        self.spec = spec
        self.report = sample_report(self.scene, self.config)

    def test_timings_only_when_recorded(self):
        doc = formats.document_from_report(self.report, self.scene, self.spec.task, self.spec.planner_config)
        self.assertIsNone(doc.metrics["rrt_s"])
        self.assertEqual(doc.metrics["wp_count"], 2)
        timed = formats.document_from_report(self.report, self.scene, self.spec.task, self.spec.planner_config, True)
        self.assertEqual(timed.metrics["komo_s"], 1.0)

    def test_dump_and_load(self):
        doc = formats.document_from_report(self.report, self.scene, self.spec.task, self.spec.planner_config)
        text = formats.dump_plan(doc)
        self.assertEqual(json.loads(text)["format"], formats.PLAN_FORMAT)
        loaded, error_message = formats.validate_plan(json.loads(text))
        self.assertIsNone(error_message)
        self.assertEqual(formats.dump_plan(loaded), text)
        self.assertEqual(loaded.object_ids, ["crate", "wedge"])
        self.assertEqual(loaded.switches[0].type, ATTACH)
        self.assertEqual(loaded.contacts[0].manipulator, "ee")

    def test_rejects_foreign_file(self):
        doc, error_message = formats.validate_plan({"format": "other"})
        self.assertIsNone(doc)
        self.assertIn("Not a plan file", error_message)
        doc, error_message = formats.validate_plan({"format": formats.PLAN_FORMAT, "states": []})
        self.assertIsNone(doc)
        self.assertIn("Malformed plan file", error_message)

    def test_report_to_dict(self):
        summary = formats.report_to_dict(self.report)
        self.assertTrue(summary["feasible"])
        self.assertEqual(summary["contacts"], 1)
        self.assertEqual(summary["rrt_s"], 0.5)
        self.assertEqual(summary["sub_plans"], [])


if __name__ == "__main__":
    unittest.main()
