"""Polyline prior maps, their graph form and ray-cast visible-subgraph retrieval."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .geometry import FeatureGraph, LineFeature, PointFeature, Pose2, knn_edges

MAP_HEADER = "graphloc-map v1"
CORNER_THRESHOLD_DEG = 20.0
DEFAULT_MAP_K = 4
_MIN_VERTEX_SEPARATION = 1e-6


class MapParseError(ValueError):
    def __init__(self, message: str, line: int, path: str = ""):
        self.line = line
        self.path = path
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class SensorModel:
    ray_count: int = 720
    fov: float = 2.0 * math.pi
    max_range: float = 30.0
    min_range: float = 0.1

    def __post_init__(self):
        if self.ray_count < 1:
            raise ValueError("ray_count must be >= 1")
        if not (0.0 <= self.min_range < self.max_range):
            raise ValueError("need 0 <= min_range < max_range")
        if not (0.0 < self.fov <= 2.0 * math.pi + 1e-12):
            raise ValueError("fov must lie in (0, 2*pi]")

    @property
    def angular_step(self) -> float:
        return self.fov / self.ray_count

    @property
    def full_circle(self) -> bool:
        return abs(self.fov - 2.0 * math.pi) < 1e-9

    def azimuths(self) -> np.ndarray:
        """Sensor-frame ray angles: -fov/2 + i * fov/ray_count."""
        return -0.5 * self.fov + np.arange(self.ray_count) * self.angular_step


class PriorMap:
    """Fixed world model made of open or closed vertex chains (world frame, meters)."""

    def __init__(self, polylines: Sequence, closed: Optional[Sequence[bool]] = None):
        chains = []
        for k, chain in enumerate(polylines):
            arr = np.array(chain, dtype=float).reshape(-1, 2)
            if len(arr) < 2:
                raise ValueError(f"polyline {k} needs at least 2 vertices")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"polyline {k} has non-finite vertices")
            steps = np.linalg.norm(np.diff(arr, axis=0), axis=1)
            if np.any(steps <= _MIN_VERTEX_SEPARATION):
                raise ValueError(f"polyline {k} has repeated consecutive vertices")
            arr.setflags(write=False)
            chains.append(arr)
        flags = tuple(bool(c) for c in closed) if closed is not None else (False,) * len(chains)
        if len(flags) != len(chains):
            raise ValueError("closed flags must match polylines")
        for k, (arr, c) in enumerate(zip(chains, flags)):
            if c and (len(arr) < 3 or np.linalg.norm(arr[0] - arr[-1]) <= _MIN_VERTEX_SEPARATION):
                raise ValueError(f"closed polyline {k} needs >= 3 distinct vertices")
        self.polylines = tuple(chains)
        self.closed = flags

    def __len__(self):
        return len(self.polylines)

    @cached_property
    def bounds(self) -> tuple[float, float, float, float]:
        if not self.polylines:
            return (0.0, 0.0, 0.0, 0.0)
        allv = np.vstack(self.polylines)
        lo, hi = allv.min(axis=0), allv.max(axis=0)
        return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    @cached_property
    def segments(self) -> np.ndarray:
        """(S, 2, 2) array of segment endpoints in polyline order."""
        segs = []
        for arr, c in zip(self.polylines, self.closed):
            n = len(arr)
            m = n if c else n - 1
            for i in range(m):
                segs.append((arr[i], arr[(i + 1) % n]))
        return np.array(segs, dtype=float).reshape(-1, 2, 2)

    @cached_property
    def segment_vertices(self) -> np.ndarray:
        """(S, 2) global vertex ids of each segment's endpoints."""
        out = []
        base = 0
        for arr, c in zip(self.polylines, self.closed):
            n = len(arr)
            m = n if c else n - 1
            for i in range(m):
                out.append((base + i, base + (i + 1) % n))
            base += n
        return np.array(out, dtype=np.int64).reshape(-1, 2)

    def transformed(self, pose: Pose2) -> PriorMap:
        return PriorMap([arr @ pose.rotation.T + pose.translation for arr in self.polylines],
                        self.closed)


@dataclass(frozen=True, eq=False)
class MapGraph(FeatureGraph):
    """Map graph plus bookkeeping that ties nodes back to map geometry."""

    segment_nodes: np.ndarray = None  # node index of each segment's line
    vertex_nodes: np.ndarray = None  # node index per global vertex id, -1 if not a corner


@dataclass(frozen=True, eq=False)
class VisibleSubgraph:
    graph: FeatureGraph
    origin_indices: np.ndarray
    hit_indices: np.ndarray  # full-graph nodes hit directly by a ray (before neighborhood growth)

    def __len__(self):
        return len(self.graph)

    @property
    def empty(self) -> bool:
        return len(self.graph) == 0


def _turn_angle(prev, cur, nxt) -> float:
    a = cur - prev
    b = nxt - cur
    c = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.acos(max(-1.0, min(1.0, c)))


def map_to_graph(pmap: PriorMap, k: int = DEFAULT_MAP_K,
                 corner_threshold_deg: float = CORNER_THRESHOLD_DEG) -> MapGraph:
    segs = pmap.segments
    nodes: list = [LineFeature.from_endpoints(a, b) for a, b in segs]
    n_vertices = sum(len(a) for a in pmap.polylines)
    vertex_nodes = np.full(n_vertices, -1, dtype=np.int64)
    thr = math.radians(corner_threshold_deg)
    base = 0
    for arr, closed in zip(pmap.polylines, pmap.closed):
        n = len(arr)
        idx = range(n) if closed else range(1, n - 1)
        for i in idx:
            turn = _turn_angle(arr[i - 1], arr[i], arr[(i + 1) % n])
            if turn >= thr:
                vertex_nodes[base + i] = len(nodes)
                nodes.append(PointFeature(arr[i]))
        base += n
    pos = np.array([nd.representative for nd in nodes], dtype=float).reshape(-1, 2)
    return MapGraph(tuple(nodes), knn_edges(pos, k), k,
                    segment_nodes=np.arange(len(segs), dtype=np.int64),
                    vertex_nodes=vertex_nodes)


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def ray_segment_intersect(origin, direction, seg_a, seg_b) -> Optional[float]:
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    a = np.asarray(seg_a, dtype=float)
    b = np.asarray(seg_b, dtype=float)
    e = b - a
    w = a - o
    denom = _cross(d[0], d[1], e[0], e[1])
    scale = max(1.0, float(np.linalg.norm(e)))
    if abs(denom) <= 1e-12 * scale:
        if abs(_cross(w[0], w[1], d[0], d[1])) > 1e-12 * max(1.0, float(np.linalg.norm(w))):
            return None
        ta = float(w @ d)
        tb = float((b - o) @ d)
        lo, hi = min(ta, tb), max(ta, tb)
        if hi < 0.0:
            return None
        return 0.0 if lo <= 0.0 else lo
    t = _cross(w[0], w[1], e[0], e[1]) / denom
    s = _cross(w[0], w[1], d[0], d[1]) / denom
    if t < 0.0 or s < 0.0 or s > 1.0:
        return None
    return float(t)


def cast_rays(origin: np.ndarray, directions: np.ndarray, segments: np.ndarray,
              max_range: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
    """First hit of every ray against every segment.

    Returns (distance, segment index); rays without a hit inside max_range
    get (inf, -1). Collinear overlaps are ignored here; use
    `ray_segment_intersect` for exact degenerate handling.
    """
    r = len(directions)
    if len(segments) == 0 or r == 0:
        return np.full(r, np.inf), np.full(r, -1, dtype=np.int64)
    ox, oy = float(origin[0]), float(origin[1])
    dx = directions[:, 0:1]
    dy = directions[:, 1:2]
    ax = segments[None, :, 0, 0]
    ay = segments[None, :, 0, 1]
    ex = segments[None, :, 1, 0] - ax
    ey = segments[None, :, 1, 1] - ay
    wx = ax - ox
    wy = ay - oy
    denom = dx * ey - dy * ex
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t = (wx * ey - wy * ex) / denom
        s = (wx * dy - wy * dx) / denom
    ok = (np.abs(denom) > 1e-12) & (t >= 0.0) & (s >= 0.0) & (s <= 1.0) & (t <= max_range)
    t = np.where(ok, t, np.inf)
    idx = np.argmin(t, axis=1)
    dist = t[np.arange(r), idx]
    idx = np.where(np.isfinite(dist), idx, -1)
    return dist, idx


def ray_directions(pose: Pose2, sensor: SensorModel) -> np.ndarray:
    ang = pose.yaw + sensor.azimuths()
    return np.column_stack([np.cos(ang), np.sin(ang)])


def raycast_visible(pmap: PriorMap, map_graph: MapGraph, pose: Pose2,
                    sensor: SensorModel) -> VisibleSubgraph:
    dist, seg = cast_rays(pose.translation, ray_directions(pose, sensor), pmap.segments,
                          sensor.max_range)
    good = np.isfinite(dist) & (dist >= sensor.min_range)
    hit_segs = np.unique(seg[good])
    hit = set(int(i) for i in map_graph.segment_nodes[hit_segs])
    for v in pmap.segment_vertices[hit_segs].ravel():
        node = int(map_graph.vertex_nodes[v])
        if node >= 0:
            hit.add(node)
    keep = set(hit)
    nbrs = map_graph.neighbors
    for i in hit:
        keep.update(nbrs[i])
    origin = np.array(sorted(keep), dtype=np.int64)
    remap = {int(g): i for i, g in enumerate(origin)}
    edges = tuple((remap[a], remap[b]) for a, b in map_graph.edges if a in remap and b in remap)
    sub = FeatureGraph(tuple(map_graph.nodes[i] for i in origin), edges, map_graph.k)
    return VisibleSubgraph(sub, origin, np.array(sorted(hit), dtype=np.int64))


def _fmt(v: float) -> str:
    s = f"{v:.6f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def format_map(pmap: PriorMap) -> str:
    lines = [MAP_HEADER]
    for arr, closed in zip(pmap.polylines, pmap.closed):
        coords = " ".join(f"{_fmt(x)} {_fmt(y)}" for x, y in arr)
        lines.append(f"poly {'closed' if closed else 'open'} {coords}")
    return "\n".join(lines) + "\n"


def save_map(pmap: PriorMap, path) -> int:
    """Write the map; returns the file size in bytes (the reported prior size)."""
    text = format_map(pmap)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return os.path.getsize(path)


def parse_map(text: str, path: str = "") -> PriorMap:
    polylines, closed = [], []
    header_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if not header_seen:
            if line != MAP_HEADER:
                raise MapParseError(f"expected header '{MAP_HEADER}'", lineno, path)
            header_seen = True
            continue
        parts = line.split()
        if parts[0] != "poly" or len(parts) < 2 or parts[1] not in ("open", "closed"):
            raise MapParseError("expected 'poly open|closed x1 y1 ...'", lineno, path)
        try:
            vals = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise MapParseError(f"bad number ({exc})", lineno, path) from None
        if len(vals) % 2 or len(vals) < 4:
            raise MapParseError("need an even number of coordinates (>= 2 vertices)", lineno, path)
        if not all(math.isfinite(v) for v in vals):
            raise MapParseError("non-finite coordinate", lineno, path)
        try:
            PriorMap([np.reshape(vals, (-1, 2))], [parts[1] == "closed"])
        except ValueError as exc:
            raise MapParseError(str(exc), lineno, path) from None
        polylines.append(np.reshape(vals, (-1, 2)))
        closed.append(parts[1] == "closed")
    if not header_seen:
        raise MapParseError("empty map file (missing header)", 1, path)
    return PriorMap(polylines, closed)


def load_map(path) -> PriorMap:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    return parse_map(text, str(path))
