import logging
import os

from .geometry import Circle, world_vertices
from .scene import FrameKind

logger = logging.getLogger(__name__)

# Pixels per meter
SCALE = 200.0

COLORS = {
    FrameKind.STATIC: "#8c8c8c",
    FrameKind.LINK: "#4682b4",
    FrameKind.MOVABLE: "#e07b39",
    FrameKind.TOOL: "#3c9d5d",
}
WAYPOINT_COLOR = "#d62728"
CONTACT_COLOR = "#f2c400"
MARKER_RADIUS = 0.012


class _Canvas:
    def __init__(self, bounds):
        self.x_min, self.y_min, self.x_max, self.y_max = bounds
        self.width = (self.x_max - self.x_min) * SCALE
        self.height = (self.y_max - self.y_min) * SCALE
        self.items = []

    def point(self, x, y):
        return (x - self.x_min) * SCALE, (self.y_max - y) * SCALE

    def shape(self, shape, pose, fill, css_class, opacity=1.0):
        if isinstance(shape, Circle):
            cx, cy = self.point(pose.x, pose.y)
            self.items.append(
                f'<circle class="{css_class}" cx="{cx:.2f}" cy="{cy:.2f}" r="{shape.radius * SCALE:.2f}" '
                f'fill="{fill}" fill-opacity="{opacity:.2f}" stroke="black" stroke-width="0.5"/>'
            )
            return
        coords = " ".join("{:.2f},{:.2f}".format(*self.point(x, y)) for x, y in world_vertices(shape, pose))
        self.items.append(
            f'<polygon class="{css_class}" points="{coords}" fill="{fill}" '
            f'fill-opacity="{opacity:.2f}" stroke="black" stroke-width="0.5"/>'
        )

    def marker(self, x, y, fill, css_class):
        cx, cy = self.point(x, y)
        self.items.append(
            f'<circle class="{css_class}" cx="{cx:.2f}" cy="{cy:.2f}" r="{MARKER_RADIUS * SCALE:.2f}" '
            f'fill="{fill}" stroke="black" stroke-width="0.5"/>'
        )

    def text(self, x, y, content):
        self.items.append(f'<text x="{x:.2f}" y="{y:.2f}" font-family="monospace" font-size="12">{content}</text>')

    def svg(self):
        header = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width:.0f}" height="{self.height:.0f}" '
            f'viewBox="0 0 {self.width:.2f} {self.height:.2f}">'
        )
        background = f'<rect width="{self.width:.2f}" height="{self.height:.2f}" fill="white"/>'
        return "\n".join([header, background] + self.items + ["</svg>"]) + "\n"


def _draw_scene(canvas, scene, config, opacity=1.0):
    # recorded object poses already follow their parents, so attachments are not needed here
    poses = scene.world_poses(config)
    for frame in scene.frames.values():
        if frame.shape is not None:
            canvas.shape(frame.shape, poses[frame.id], COLORS[frame.kind], f"frame {frame.kind.value}", opacity)


def render_frame(scene, config, t=None):
    """
    SVG of the scene at one configuration.
    """
    canvas = _Canvas(scene.bounds)
    _draw_scene(canvas, scene, config)
    if t is not None:
        canvas.text(8, 16, f"t={t}")
    return canvas.svg()


def render_overview(scene, doc, silhouettes=8):
    """
    SVG of the start state with target silhouettes, waypoints and contact points.

    Args:
        scene (Scene): The scene of the plan.
        doc (PlanDocument): The recorded plan.
        silhouettes (int): Number of intermediate target silhouettes.

    Returns:
        str: SVG document.
    """
    canvas = _Canvas(scene.bounds)
    shape = scene.frame(doc.target).shape
    if doc.states:
        _draw_scene(canvas, scene, doc.states[0])
        stride = max(1, len(doc.states) // max(1, silhouettes))
        for state in doc.states[stride::stride]:
            canvas.shape(shape, state.object_poses[doc.target], COLORS[FrameKind.MOVABLE], "silhouette", 0.25)
        canvas.shape(shape, doc.states[-1].object_poses[doc.target], COLORS[FrameKind.MOVABLE], "final", 0.6)
    canvas.shape(shape, doc.goal, "none", "goal", 1.0)
    for pose in doc.waypoints:
        canvas.marker(pose.x, pose.y, WAYPOINT_COLOR, "waypoint")
    for contact in doc.contacts:
        canvas.marker(contact.world[0], contact.world[1], CONTACT_COLOR, "contact")
    status = "feasible" if doc.feasible else "infeasible"
    canvas.text(8, 16, f"{doc.target}: {status}, {len(doc.waypoints)} waypoints, {len(doc.contacts)} contacts")
    return canvas.svg()


def write_svgs(scene, doc, directory):
    """
    Writes one SVG per timestep and an overview.svg.

    Returns:
        list: Paths written, frames first.
    """
    os.makedirs(directory, exist_ok=True)
    written = []
    for t, config in enumerate(doc.states):
        path = os.path.join(directory, f"frame_{t:04d}.svg")
        with open(path, "w", encoding="utf-8") as f:
            f.write(render_frame(scene, config, t))
        written.append(path)
    overview = os.path.join(directory, "overview.svg")
    with open(overview, "w", encoding="utf-8") as f:
        f.write(render_overview(scene, doc))
    written.append(overview)
    logger.info("Wrote SVG frames", extra={"directory": directory, "frames": len(doc.states)})
    return written
