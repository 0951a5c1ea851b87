"""SE(2) algebra, planar feature primitives and kNN graph construction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Union

import numpy as np

_SMALL_ANGLE = 1e-8


class DomainError(ValueError):
    """Raised when an input lies outside the domain of a map (e.g. log at yaw = pi)."""


def wrap_angle(a: float) -> float:
    """Wrap to the half-open interval (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = self.rotation
        m[:2, 2] = self.translation
        return m

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])

    def __matmul__(self, other: Pose2) -> Pose2:
        return compose(self, other)


@dataclass(frozen=True)
class Twist2:
    dx: float = 0.0
    dy: float = 0.0
    dphi: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dphi])

    @classmethod
    def from_array(cls, v) -> Twist2:
        return cls(float(v[0]), float(v[1]), float(v[2]))


IDENTITY = Pose2()


def _v_coeffs(theta: float) -> tuple[float, float]:
    # V(theta) = [[a, -b], [b, a]] with a = sin/theta, b = (1 - cos)/theta
    if abs(theta) < _SMALL_ANGLE:
        return 1.0 - theta * theta / 6.0, theta / 2.0 - theta**3 / 24.0
    # 2 sin^2(theta/2) avoids the cancellation in 1 - cos near zero
    return math.sin(theta) / theta, 2.0 * math.sin(0.5 * theta) ** 2 / theta


def se2_exp(v: Twist2) -> Pose2:
    a, b = _v_coeffs(v.dphi)
    return Pose2(a * v.dx - b * v.dy, b * v.dx + a * v.dy, v.dphi)


def se2_log(p: Pose2) -> Twist2:
    theta = p.yaw
    if theta == math.pi:
        raise DomainError("se2_log is undefined at yaw = pi (branch boundary)")
    half = 0.5 * theta
    if abs(theta) < _SMALL_ANGLE:
        alpha = 1.0 - theta * theta / 12.0
    else:
        alpha = half / math.tan(half)
    # V^-1 = [[alpha, half], [-half, alpha]]
    return Twist2(alpha * p.x + half * p.y, -half * p.x + alpha * p.y, theta)


def compose(a: Pose2, b: Pose2) -> Pose2:
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.yaw + b.yaw)


def inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return Pose2(-(c * p.x + s * p.y), s * p.x - c * p.y, -p.yaw)


def between(a: Pose2, b: Pose2) -> Pose2:
    """Relative transform a^-1 * b."""
    return compose(inverse(a), b)


def transform_point(p: Pose2, pt) -> np.ndarray:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return np.array([p.x + c * pt[0] - s * pt[1], p.y + s * pt[0] + c * pt[1]])


def transform_points(p: Pose2, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    return pts @ p.rotation.T + p.translation


def transform_direction(p: Pose2, d) -> np.ndarray:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return np.array([c * d[0] - s * d[1], s * d[0] + c * d[1]])


def canonicalize_direction(d) -> np.ndarray:
    """Unit direction with angle in [0, pi)."""
    d = np.asarray(d, dtype=float)
    n = math.hypot(d[0], d[1])
    if n == 0.0 or not math.isfinite(n):
        raise ValueError("direction must be a finite non-zero vector")
    if abs(n - 1.0) < 1e-15:
        n = 1.0  # already unit: keeps the map idempotent to the bit
    dx, dy = d[0] / n, d[1] / n
    # rounding noise on a horizontal direction must not decide the sign
    if abs(dy) < 1e-12:
        dx, dy = math.copysign(1.0, dx), 0.0
    if dy < 0.0 or (dy == 0.0 and dx < 0.0):
        dx, dy = -dx, -dy
    return np.array([dx + 0.0, dy + 0.0])


def line_angle(a, b) -> float:
    """Undirected angle between two unit directions, in [0, pi/2]."""
    c = abs(float(a[0]) * float(b[0]) + float(a[1]) * float(b[1]))
    return math.acos(min(1.0, c))


@dataclass(frozen=True, eq=False)
class PointFeature:
    position: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        pos = np.array(self.position, dtype=float).reshape(2)
        if not np.all(np.isfinite(pos)):
            raise ValueError("point position must be finite")
        if self.weight < 0:
            raise ValueError("feature weight must be non-negative")
        pos.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "weight", float(self.weight))

    @property
    def representative(self) -> np.ndarray:
        return self.position

    def transformed(self, pose: Pose2) -> PointFeature:
        return PointFeature(transform_point(pose, self.position), self.weight)

    def __eq__(self, other):
        return (isinstance(other, PointFeature)
                and np.array_equal(self.position, other.position)
                and self.weight == other.weight)

    def __hash__(self):
        return hash((tuple(self.position), self.weight))


@dataclass(frozen=True, eq=False)
class LineFeature:
    anchor: np.ndarray
    direction: np.ndarray
    half_length: float
    support_count: int = 0
    weight: float = 1.0

    def __post_init__(self):
        anchor = np.array(self.anchor, dtype=float).reshape(2)
        if not np.all(np.isfinite(anchor)):
            raise ValueError("line anchor must be finite")
        if self.half_length < 0 or self.support_count < 0 or self.weight < 0:
            raise ValueError("half_length, support_count and weight must be non-negative")
        direction = canonicalize_direction(self.direction)
        anchor.setflags(write=False)
        direction.setflags(write=False)
        object.__setattr__(self, "anchor", anchor)
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "half_length", float(self.half_length))
        object.__setattr__(self, "support_count", int(self.support_count))
        object.__setattr__(self, "weight", float(self.weight))

    @classmethod
    def from_endpoints(cls, a, b, support_count: int = 0, weight: float = 1.0) -> LineFeature:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return cls(0.5 * (a + b), b - a, 0.5 * float(np.linalg.norm(b - a)),
                   support_count, weight)

    @property
    def representative(self) -> np.ndarray:
        return self.anchor

    @property
    def normal(self) -> np.ndarray:
        return np.array([-self.direction[1], self.direction[0]])

    @property
    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        off = self.half_length * self.direction
        return self.anchor - off, self.anchor + off

    def transformed(self, pose: Pose2) -> LineFeature:
        return LineFeature(transform_point(pose, self.anchor),
                           transform_direction(pose, self.direction),
                           self.half_length, self.support_count, self.weight)

    def __eq__(self, other):
        return (isinstance(other, LineFeature)
                and np.array_equal(self.anchor, other.anchor)
                and np.array_equal(self.direction, other.direction)
                and self.half_length == other.half_length
                and self.support_count == other.support_count
                and self.weight == other.weight)

    def __hash__(self):
        return hash((tuple(self.anchor), tuple(self.direction), self.half_length))


FeatureNode = Union[PointFeature, LineFeature]


def point_segment_distance(p, a, b) -> float:
    p, a, b = (np.asarray(v, dtype=float) for v in (p, a, b))
    e = b - a
    ee = float(e @ e)
    s = 0.0 if ee == 0.0 else min(1.0, max(0.0, float((p - a) @ e) / ee))
    return float(np.linalg.norm(a + s * e - p))


@dataclass(frozen=True)
class FeatureGraph:
    nodes: tuple
    edges: tuple
    k: int = 0

    def __len__(self):
        return len(self.nodes)

    @cached_property
    def positions(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros((0, 2))
        return np.array([n.representative for n in self.nodes], dtype=float)

    @cached_property
    def is_line(self) -> np.ndarray:
        return np.array([isinstance(n, LineFeature) for n in self.nodes], dtype=bool)

    @cached_property
    def directions(self) -> np.ndarray:
        """Unit directions for line nodes; zeros for point nodes."""
        d = np.zeros((len(self.nodes), 2))
        for i, n in enumerate(self.nodes):
            if isinstance(n, LineFeature):
                d[i] = n.direction
        return d

    @cached_property
    def half_lengths(self) -> np.ndarray:
        return np.array([n.half_length if isinstance(n, LineFeature) else 0.0
                         for n in self.nodes], dtype=float)

    @cached_property
    def weights(self) -> np.ndarray:
        return np.array([n.weight for n in self.nodes], dtype=float)

    @cached_property
    def edge_array(self) -> np.ndarray:
        if not self.edges:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array(self.edges, dtype=np.int64)

    @cached_property
    def neighbors(self) -> tuple:
        adj = [[] for _ in self.nodes]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return tuple(tuple(sorted(a)) for a in adj)


def knn_edges(positions: np.ndarray, k: int) -> tuple:
    n = len(positions)
    if n < 2:
        return ()
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    np.fill_diagonal(dist, np.inf)
    kk = min(k, n - 1)
    # stable sort keeps the lower index first on ties
    order = np.argsort(dist, axis=1, kind="stable")[:, :kk]
    edges = set()
    for i in range(n):
        for j in order[i]:
            j = int(j)
            edges.add((i, j) if i < j else (j, i))
    return tuple(sorted(edges))


def build_knn_graph(nodes: Sequence[FeatureNode], k: int) -> FeatureGraph:
    if k < 1:
        raise ValueError("k must be >= 1")
    nodes = tuple(nodes)
    if not nodes:
        return FeatureGraph((), (), k)
    pos = np.array([n.representative for n in nodes], dtype=float)
    return FeatureGraph(nodes, knn_edges(pos, k), k)


def transform_graph(graph: FeatureGraph, pose: Pose2) -> FeatureGraph:
    """Rigidly move every node; edges are kept as-is."""
    return FeatureGraph(tuple(n.transformed(pose) for n in graph.nodes), graph.edges, graph.k)
