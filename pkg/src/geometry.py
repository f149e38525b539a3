import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Tuple, Union

import numpy as np

TWO_PI = 2.0 * math.pi


class InvalidShapeError(ValueError):
    pass


def wrap_angle(theta):
    """
    Maps an angle onto [-pi, pi). Angles already in range come back unchanged.
    """
    if -math.pi <= theta < math.pi:
        return theta
    wrapped = (theta + math.pi) % TWO_PI - math.pi
    # float modulo can land exactly on the upper bound
    if wrapped >= math.pi:
        wrapped -= TWO_PI
    return wrapped


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def from_array(cls, values):
        return cls(values[0], values[1], values[2])

    def as_array(self):
        return np.array([self.x, self.y, self.theta])

    def as_list(self):
        return [self.x, self.y, self.theta]

    @property
    def position(self):
        return np.array([self.x, self.y])

    def compose(self, other):
        return compose(self, other)

    def inverse(self):
        return inverse(self)

    def transform_point(self, point):
        return transform_point(self, point)


IDENTITY = Pose2()


def compose(a, b):
    """
    Rigid-body composition a ∘ b: b expressed in a's frame, returned in a's parent frame.
    """
    c = math.cos(a.theta)
    s = math.sin(a.theta)
    return Pose2(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.theta + b.theta,
    )


def inverse(a):
    c = math.cos(a.theta)
    s = math.sin(a.theta)
    return Pose2(
        -(c * a.x + s * a.y),
        s * a.x - c * a.y,
        -a.theta,
    )


def transform_point(pose, point):
    c = math.cos(pose.theta)
    s = math.sin(pose.theta)
    px, py = float(point[0]), float(point[1])
    return np.array([pose.x + c * px - s * py, pose.y + s * px + c * py])


def inverse_transform_point(pose, point):
    c = math.cos(pose.theta)
    s = math.sin(pose.theta)
    dx = float(point[0]) - pose.x
    dy = float(point[1]) - pose.y
    return np.array([c * dx + s * dy, -s * dx + c * dy])


def relative_pose(a, b):
    """
    Pose of b expressed in the frame of a.
    """
    return compose(inverse(a), b)


def pose_distance(a, b, angular_weight=1.0):
    """
    SE(2) metric: translation plus weighted wrapped rotation.
    """
    return math.hypot(b.x - a.x, b.y - a.y) + angular_weight * abs(wrap_angle(b.theta - a.theta))


def interpolate_pose(a, b, fraction):
    """
    Linear in translation, shortest arc in rotation.
    """
    return Pose2(
        a.x + fraction * (b.x - a.x),
        a.y + fraction * (b.y - a.y),
        a.theta + fraction * wrap_angle(b.theta - a.theta),
    )


@dataclass(frozen=True)
class Circle:
    radius: float

    def __post_init__(self):
        if not (self.radius > 0.0 and math.isfinite(self.radius)):
            raise InvalidShapeError(f"circle radius must be positive, got {self.radius}")

    @property
    def bounding_radius(self):
        return self.radius

    @property
    def perimeter(self):
        return TWO_PI * self.radius


@dataclass(frozen=True)
class Box:
    half_extents: Tuple[float, float]

    def __post_init__(self):
        hx, hy = self.half_extents
        if not (hx > 0.0 and hy > 0.0):
            raise InvalidShapeError(f"box half-extents must be positive, got {self.half_extents}")
        object.__setattr__(self, "half_extents", (float(hx), float(hy)))

    @cached_property
    def vertices(self):
        hx, hy = self.half_extents
        return np.array([[hx, -hy], [hx, hy], [-hx, hy], [-hx, -hy]])

    @property
    def bounding_radius(self):
        return math.hypot(*self.half_extents)

    @property
    def perimeter(self):
        return 4.0 * (self.half_extents[0] + self.half_extents[1])


@dataclass(frozen=True)
class ConvexPolygon:
    vertices_ccw: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        points = tuple((float(x), float(y)) for x, y in self.vertices_ccw)
        object.__setattr__(self, "vertices_ccw", points)
        if len(points) < 3:
            raise InvalidShapeError("polygon needs at least 3 vertices")
        verts = np.array(points)
        edges = np.roll(verts, -1, axis=0) - verts
        if np.any(np.hypot(edges[:, 0], edges[:, 1]) <= 1e-12):
            raise InvalidShapeError("polygon has repeated consecutive vertices")
        area = 0.5 * float(np.sum(verts[:, 0] * np.roll(verts[:, 1], -1) - np.roll(verts[:, 0], -1) * verts[:, 1]))
        if area <= 1e-12:
            raise InvalidShapeError(f"polygon must have positive area with CCW vertices, got area {area}")
        turns = edges[:, 0] * np.roll(edges[:, 1], -1) - edges[:, 1] * np.roll(edges[:, 0], -1)
        if np.any(turns < -1e-12):
            raise InvalidShapeError("polygon is not convex")

    @cached_property
    def vertices(self):
        return np.array(self.vertices_ccw)

    @property
    def bounding_radius(self):
        return float(np.max(np.hypot(self.vertices[:, 0], self.vertices[:, 1])))

    @property
    def perimeter(self):
        edges = np.roll(self.vertices, -1, axis=0) - self.vertices
        return float(np.sum(np.hypot(edges[:, 0], edges[:, 1])))


Shape = Union[Circle, Box, ConvexPolygon]


@dataclass(frozen=True)
class DistanceResult:
    distance: float
    witness_a: np.ndarray
    witness_b: np.ndarray
    normal: np.ndarray
    pair: Optional[Tuple[str, str]] = None

    def swapped(self):
        pair = None if self.pair is None else (self.pair[1], self.pair[0])
        return DistanceResult(self.distance, self.witness_b, self.witness_a, -self.normal, pair)


NO_CONTACT = DistanceResult(math.inf, np.zeros(2), np.zeros(2), np.array([1.0, 0.0]))


def _rotation(theta):
    c = math.cos(theta)
    s = math.sin(theta)
    return np.array([[c, -s], [s, c]])


def world_vertices(shape, pose):
    return shape.vertices @ _rotation(pose.theta).T + np.array([pose.x, pose.y])


def _edge_normals(vertices):
    edges = np.roll(vertices, -1, axis=0) - vertices
    normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
    return normals / np.hypot(normals[:, 0], normals[:, 1])[:, None]


def _closest_on_segments(points, seg_start, seg_end):
    """
    Closest points from every point to every segment.

    Args:
        points (np.ndarray): (p, 2) query points.
        seg_start (np.ndarray): (s, 2) segment starts.
        seg_end (np.ndarray): (s, 2) segment ends.

    Returns:
        tuple: (closest (p, s, 2), distances (p, s)).
    """
    ab = seg_end - seg_start
    denom = np.einsum("ij,ij->i", ab, ab)
    rel = points[:, None, :] - seg_start[None, :, :]
    t = np.clip(np.einsum("psj,sj->ps", rel, ab) / denom[None, :], 0.0, 1.0)
    closest = seg_start[None, :, :] + t[:, :, None] * ab[None, :, :]
    diff = points[:, None, :] - closest
    return closest, np.hypot(diff[..., 0], diff[..., 1])


def _inside_convex(point, vertices):
    edges = np.roll(vertices, -1, axis=0) - vertices
    rel = point[None, :] - vertices
    return bool(np.all(edges[:, 0] * rel[:, 1] - edges[:, 1] * rel[:, 0] >= 0.0))


def _circle_circle(ra, ca, rb, cb):
    diff = cb - ca
    gap = math.hypot(diff[0], diff[1])
    normal = diff / gap if gap > 1e-15 else np.array([1.0, 0.0])
    return DistanceResult(gap - ra - rb, ca + ra * normal, cb - rb * normal, normal)


def _polygon_circle(vertices, radius, center):
    closest, dist = _closest_on_segments(center[None, :], vertices, np.roll(vertices, -1, axis=0))
    k = int(np.argmin(dist[0]))
    boundary_point = closest[0, k]
    if _inside_convex(center, vertices):
        normal = _edge_normals(vertices)[k]
        return DistanceResult(-(dist[0, k] + radius), boundary_point, center - radius * normal, normal)
    diff = center - boundary_point
    gap = math.hypot(diff[0], diff[1])
    normal = diff / gap
    return DistanceResult(gap - radius, boundary_point, center - radius * normal, normal)


# Iteration caps of the distance and penetration searches
GJK_MAX_ITERATIONS = 64
EPA_MAX_ITERATIONS = 64
EPA_TOLERANCE = 1e-10


def _support_pair(va, vb, direction):
    """
    Support point of the Minkowski difference A - B, with the vertices realizing it.
    """
    a = va[int(np.argmax(va @ direction))]
    b = vb[int(np.argmin(vb @ direction))]
    return a - b, a, b


def _cross(u, v):
    return u[0] * v[1] - u[1] * v[0]


def _closest_on_segment(p, q):
    """
    Point of segment pq nearest to the origin, with the weights of p and q.
    """
    edge = q - p
    length2 = float(edge @ edge)
    t = 0.0 if length2 <= 0.0 else min(1.0, max(0.0, -float(p @ edge) / length2))
    return p + t * edge, (1.0 - t, t)


def _reduce_segment(p, q):
    point, (wp, wq) = _closest_on_segment(p[0], q[0])
    if wq == 0.0:
        return point, [p], [1.0]
    if wp == 0.0:
        return point, [q], [1.0]
    return point, [p, q], [wp, wq]


def _closest_on_simplex(simplex):
    """
    Reduces a GJK simplex to the sub-simplex nearest the origin.

    Returns:
        tuple: (closest point, reduced simplex, barycentric weights); the point
               is None when the triangle holds the origin.
    """
    if len(simplex) == 1:
        return simplex[0][0], simplex, [1.0]
    if len(simplex) == 2:
        return _reduce_segment(simplex[0], simplex[1])

    w0, w1, w2 = (entry[0] for entry in simplex)
    area = _cross(w1 - w0, w2 - w0)
    if abs(area) > 1e-18:
        signs = (_cross(w1 - w0, -w0) * area, _cross(w2 - w1, -w1) * area, _cross(w0 - w2, -w2) * area)
        if all(s >= 0.0 for s in signs):
            return None, simplex, None
    candidates = [_reduce_segment(simplex[i], simplex[j]) for i, j in ((0, 1), (1, 2), (2, 0))]
    return min(candidates, key=lambda c: float(c[0] @ c[0]))


def _gjk(va, vb):
    """
    Closest points of two convex polygons by support-function iteration.

    Returns:
        tuple: (v, simplex, weights) with v = witness_a - witness_b, or
               (None, simplex, None) when the polygons overlap or touch.
    """
    simplex = [_support_pair(va, vb, np.mean(vb, axis=0) - np.mean(va, axis=0))]
    for _ in range(GJK_MAX_ITERATIONS):
        v, simplex, weights = _closest_on_simplex(simplex)
        if v is None or float(v @ v) <= 1e-24:
            return None, simplex, None
        w = _support_pair(va, vb, -v)
        vv = float(v @ v)
        # no support point gets closer to the origin than v
        if vv - float(v @ w[0]) <= 1e-12 * vv or any(np.array_equal(w[0], s[0]) for s in simplex):
            return v, simplex, weights
        simplex = simplex + [w]
    v, simplex, weights = _closest_on_simplex(simplex)
    if v is None or float(v @ v) <= 1e-24:
        return None, simplex, None
    return v, simplex, weights


def _seed_polytope(va, vb, simplex):
    """
    Grows a GJK simplex holding the origin into a counter-clockwise triangle.
    """
    points = list(simplex)
    if len(points) == 1:
        for direction in (np.array([1.0, 0.0]), np.array([-1.0, 0.0]), np.array([0.0, 1.0])):
            w = _support_pair(va, vb, direction)
            if not np.allclose(w[0], points[0][0]):
                points.append(w)
                break
    if len(points) == 2:
        edge = points[1][0] - points[0][0]
        normal = np.array([-edge[1], edge[0]])
        for direction in (normal, -normal):
            w = _support_pair(va, vb, direction)
            if abs(_cross(edge, w[0] - points[0][0])) > 1e-14:
                points.append(w)
                break
    if _cross(points[1][0] - points[0][0], points[2][0] - points[0][0]) < 0.0:
        points[1], points[2] = points[2], points[1]
    return points


def _closest_edge(polytope):
    best = None
    for i in range(len(polytope)):
        p = polytope[i][0]
        edge = polytope[(i + 1) % len(polytope)][0] - p
        length = math.hypot(edge[0], edge[1])
        if length <= 1e-15:
            continue
        normal = np.array([edge[1], -edge[0]]) / length
        gap = float(normal @ p)
        if best is None or gap < best[0]:
            best = (gap, i, normal)
    return best


def _epa(va, vb, simplex):
    """
    Penetration depth and direction by expanding a polytope inside A - B.

    Returns:
        DistanceResult: Negative distance along the minimum-translation normal.
    """
    polytope = _seed_polytope(va, vb, simplex)
    for _ in range(EPA_MAX_ITERATIONS):
        gap, i, normal = _closest_edge(polytope)
        w = _support_pair(va, vb, normal)
        if float(normal @ w[0]) - gap <= EPA_TOLERANCE:
            break
        polytope.insert(i + 1, w)
    else:
        gap, i, normal = _closest_edge(polytope)

    first = polytope[i]
    second = polytope[(i + 1) % len(polytope)]
    _, (wp, wq) = _closest_on_segment(first[0], second[0])
    witness_b = wp * first[2] + wq * second[2]
    depth = max(gap, 0.0)
    return DistanceResult(-depth, witness_b + depth * normal, witness_b, normal)


def _polygon_polygon(va, vb):
    v, simplex, weights = _gjk(va, vb)
    if v is None:
        return _epa(va, vb, simplex)
    witness_a = sum(weight * entry[1] for weight, entry in zip(weights, simplex))
    witness_b = sum(weight * entry[2] for weight, entry in zip(weights, simplex))
    gap = math.sqrt(float(v @ v))
    return DistanceResult(gap, witness_a, witness_b, -v / gap)


def signed_distance(shape_a, pose_a, shape_b, pose_b):
    """
    Signed distance between two convex shapes placed at world poses.

    Args:
        shape_a (Shape): First shape.
        pose_a (Pose2): World pose of the first shape.
        shape_b (Shape): Second shape.
        pose_b (Pose2): World pose of the second shape.

    Returns:
        DistanceResult: Distance (negative on penetration), witness points on each
        shape and the unit normal pointing from a to b.
    """
    a_is_circle = isinstance(shape_a, Circle)
    b_is_circle = isinstance(shape_b, Circle)
    if a_is_circle and b_is_circle:
        return _circle_circle(shape_a.radius, pose_a.position, shape_b.radius, pose_b.position)
    if b_is_circle:
        return _polygon_circle(world_vertices(shape_a, pose_a), shape_b.radius, pose_b.position)
    if a_is_circle:
        return _polygon_circle(world_vertices(shape_b, pose_b), shape_a.radius, pose_a.position).swapped()
    return _polygon_polygon(world_vertices(shape_a, pose_a), world_vertices(shape_b, pose_b))


def point_signed_distance(shape, pose, point):
    """
    Signed distance from a world point to the shape boundary (negative inside).
    """
    point = np.asarray(point, dtype=float)
    if isinstance(shape, Circle):
        return math.hypot(point[0] - pose.x, point[1] - pose.y) - shape.radius
    vertices = world_vertices(shape, pose)
    _, dist = _closest_on_segments(point[None, :], vertices, np.roll(vertices, -1, axis=0))
    gap = float(np.min(dist))
    return -gap if _inside_convex(point, vertices) else gap


def closest_boundary_point(shape, pose, point):
    """
    Point on the shape boundary nearest to a world point, in world coordinates.
    """
    point = np.asarray(point, dtype=float)
    if isinstance(shape, Circle):
        diff = point - pose.position
        gap = math.hypot(diff[0], diff[1])
        direction = diff / gap if gap > 1e-15 else np.array([1.0, 0.0])
        return pose.position + shape.radius * direction
    vertices = world_vertices(shape, pose)
    closest, dist = _closest_on_segments(point[None, :], vertices, np.roll(vertices, -1, axis=0))
    return closest[0, int(np.argmin(dist[0]))]


def _boundary_loop(shape):
    if isinstance(shape, Box):
        hx, hy = shape.half_extents
        # starts on the +x axis so u=0 matches the circle parameterization
        return np.array([[hx, 0.0], [hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy], [hx, 0.0]])
    return np.vstack([shape.vertices, shape.vertices[:1]])


def _locate_on_loop(shape, u):
    loop = _boundary_loop(shape)
    segments = np.diff(loop, axis=0)
    lengths = np.hypot(segments[:, 0], segments[:, 1])
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
    arc = (u % 1.0) * cumulative[-1]
    k = min(int(np.searchsorted(cumulative, arc, side="right")) - 1, len(segments) - 1)
    fraction = (arc - cumulative[k]) / lengths[k]
    return loop[k] + fraction * segments[k], segments[k] / lengths[k]


def sample_boundary_point(shape, u):
    """
    Arc-length parameterization of the boundary in the shape frame.

    Args:
        shape (Shape): The shape to sample.
        u (float): Boundary parameter in [0, 1).

    Returns:
        np.ndarray: Boundary point in the shape frame.
    """
    if isinstance(shape, Circle):
        angle = TWO_PI * (u % 1.0)
        return np.array([shape.radius * math.cos(angle), shape.radius * math.sin(angle)])
    point, _ = _locate_on_loop(shape, u)
    return point


def boundary_normal(shape, u):
    """
    Outward unit normal at boundary parameter u, in the shape frame.
    """
    if isinstance(shape, Circle):
        angle = TWO_PI * (u % 1.0)
        return np.array([math.cos(angle), math.sin(angle)])
    _, tangent = _locate_on_loop(shape, u)
    return np.array([tangent[1], -tangent[0]])


def boundary_parameter(shape, local_point):
    """
    Inverse of sample_boundary_point for a point on (or near) the boundary.
    """
    local_point = np.asarray(local_point, dtype=float)
    if isinstance(shape, Circle):
        return (math.atan2(local_point[1], local_point[0]) / TWO_PI) % 1.0
    loop = _boundary_loop(shape)
    closest, dist = _closest_on_segments(local_point[None, :], loop[:-1], loop[1:])
    k = int(np.argmin(dist[0]))
    segments = np.diff(loop, axis=0)
    lengths = np.hypot(segments[:, 0], segments[:, 1])
    arc = float(np.sum(lengths[:k])) + math.hypot(*(closest[0, k] - loop[k]))
    return (arc / float(np.sum(lengths))) % 1.0
