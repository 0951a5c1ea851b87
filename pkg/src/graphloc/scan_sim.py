"""Synthetic planar scans along scripted trajectories, with moving disc occluders."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Pose2
from .prior_map import PriorMap, SensorModel, cast_rays, ray_directions


class ConfigError(ValueError):
    """Invalid scenario or command configuration."""


@dataclass(frozen=True, eq=False)
class Scan:
    timestamp: float
    ranges: np.ndarray  # NaN where invalid
    valid: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.ranges, dtype=float)
        v = np.asarray(self.valid, dtype=bool)
        if r.shape != v.shape:
            raise ValueError("ranges and valid mask must have equal length")
        r = np.where(v, r, np.nan)
        r.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "ranges", r)
        object.__setattr__(self, "valid", v)

    def __len__(self):
        return len(self.ranges)

    def points(self, sensor: SensorModel) -> np.ndarray:
        """Sensor-frame Cartesian points (NaN rows for invalid rays)."""
        az = sensor.azimuths()
        return np.column_stack([self.ranges * np.cos(az), self.ranges * np.sin(az)])


@dataclass(frozen=True, eq=False)
class DiscOccluder:
    times: np.ndarray
    waypoints: np.ndarray
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("occluder radius must be positive")
        t = np.asarray(self.times, dtype=float).reshape(-1)
        w = np.asarray(self.waypoints, dtype=float).reshape(-1, 2)
        if len(t) != len(w) or len(t) == 0:
            raise ValueError("need one waypoint per time stamp")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "waypoints", w)

    def center(self, t: float) -> np.ndarray:
        """Piecewise-linear position, held constant outside the scripted interval."""
        return np.array([np.interp(t, self.times, self.waypoints[:, 0]),
                         np.interp(t, self.times, self.waypoints[:, 1])])


@dataclass(eq=False)
class Scenario:
    map: PriorMap
    sensor: SensorModel
    times: np.ndarray
    poses: list
    occluders: list = field(default_factory=list)
    noise_sigma: float = 0.0
    rng_seed: int = 0
    world: Optional[PriorMap] = None  # what the sensor actually sees; defaults to the prior
    kind: str = "custom"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.poses):
            raise ConfigError("one pose per timestamp required")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigError("timestamps must be strictly increasing")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    @property
    def observed_world(self) -> PriorMap:
        return self.world if self.world is not None else self.map

    def __len__(self):
        return len(self.poses)


def disc_hits(origin: np.ndarray, directions: np.ndarray, center: np.ndarray,
              radius: float) -> np.ndarray:
    """Ray distance to a disc boundary (inf when missed or when the origin is inside)."""
    oc = origin - center
    cc = float(oc @ oc) - radius * radius
    out = np.full(len(directions), np.inf)
    if cc <= 0.0:
        return out
    b = directions @ oc
    disc = b * b - cc
    hit = (disc >= 0.0) & (b < 0.0)
    out[hit] = -b[hit] - np.sqrt(disc[hit])
    return out


def true_ranges(scenario: Scenario, t_index: int) -> np.ndarray:
    """Noise-free first-hit ranges against world and occluders (inf = no hit)."""
    pose = scenario.poses[t_index]
    dirs = ray_directions(pose, scenario.sensor)
    dist, _ = cast_rays(pose.translation, dirs, scenario.observed_world.segments)
    t = scenario.times[t_index]
    for occ in scenario.occluders:
        dist = np.minimum(dist, disc_hits(pose.translation, dirs, occ.center(t), occ.radius))
    return dist


def simulate_scan(scenario: Scenario, t_index: int) -> Scan:
    if not 0 <= t_index < len(scenario):
        raise IndexError(t_index)
    s = scenario.sensor
    dist = true_ranges(scenario, t_index)
    valid = np.isfinite(dist) & (dist >= s.min_range) & (dist <= s.max_range)
    rng = np.random.default_rng([int(scenario.rng_seed), int(t_index)])
    noise = rng.normal(0.0, 1.0, len(dist)) * scenario.noise_sigma
    ranges = np.where(valid, np.clip(np.where(valid, dist, 0.0) + noise, s.min_range, s.max_range),
                      np.nan)
    return Scan(float(scenario.times[t_index]), ranges, valid)


def simulate_all(scenario: Scenario) -> list:
    return [simulate_scan(scenario, i) for i in range(len(scenario))]


# --------------------------------------------------------------------- scenes

def _subdivide(a, b, max_segment: float) -> list:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = max(1, int(math.ceil(np.linalg.norm(b - a) / max_segment - 1e-9)))
    return [a + (b - a) * (i / n) for i in range(n)]


def _closed_outline(corners, max_segment: float) -> np.ndarray:
    """Closed polygon through `corners`, edges split into pieces <= max_segment."""
    pts = []
    n = len(corners)
    for i in range(n):
        pts.extend(_subdivide(corners[i], corners[(i + 1) % n], max_segment))
    return np.array(pts)


def _box(cx, cy, sx, sy) -> list:
    hx, hy = sx / 2.0, sy / 2.0
    return [(cx - hx, cy - hy), (cx + hx, cy - hy), (cx + hx, cy + hy), (cx - hx, cy + hy)]


def _pop(params: dict, key: str, default, cast=float):
    v = params.pop(key, default)
    try:
        return cast(v)
    except (TypeError, ValueError):
        raise ConfigError(f"parameter {key!r}: cannot convert {v!r}") from None


def _sensor_from(params: dict, **defaults) -> SensorModel:
    kw = dict(ray_count=720, fov=2.0 * math.pi, max_range=30.0, min_range=0.1)
    kw.update(defaults)
    try:
        return SensorModel(
            ray_count=_pop(params, "ray_count", kw["ray_count"], int),
            fov=_pop(params, "fov", kw["fov"]),
            max_range=_pop(params, "max_range", kw["max_range"]),
            min_range=_pop(params, "min_range", kw["min_range"]),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def _random_occluders(rng, count: int, times: np.ndarray, region, blocked, radius: float,
                      speed: float = 1.0) -> list:
    """Discs wandering between random free-space waypoints."""
    x0, y0, x1, y1 = region
    t_end = float(times[-1])

    def free_point():
        for _ in range(1000):
            p = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
            if not any(bx0 - radius <= p[0] <= bx1 + radius and by0 - radius <= p[1] <= by1 + radius
                       for bx0, by0, bx1, by1 in blocked):
                return p
        raise ConfigError("could not place occluder in free space")

    occluders = []
    for _ in range(count):
        wp = [free_point()]
        ts = [float(times[0])]
        v = speed * rng.uniform(0.6, 1.4)
        while ts[-1] < t_end:
            nxt = free_point()
            ts.append(ts[-1] + max(1e-3, float(np.linalg.norm(nxt - wp[-1]))) / v)
            wp.append(nxt)
        occluders.append(DiscOccluder(np.array(ts), np.array(wp), radius))
    return occluders


def _loop(params: dict) -> Scenario:
    width = _pop(params, "width", 50.0)
    height = _pop(params, "height", 30.0)
    frames = _pop(params, "frames", 1000, int)
    rate = _pop(params, "rate", 10.0)
    noise = _pop(params, "noise", 0.01)
    n_occ = _pop(params, "occluders", 0, int)
    occ_radius = _pop(params, "occluder_radius", 0.3)
    seed = _pop(params, "seed", 0, int)
    max_seg = _pop(params, "max_segment", 5.0)
    sensor = _sensor_from(params)
    if width < 30 or height < 20 or frames < 3 or rate <= 0 or max_seg <= 0:
        raise ConfigError("loop needs width >= 30, height >= 20, frames >= 3, rate > 0")
    cx, cy = width / 2.0, height / 2.0
    polys = [_closed_outline([(0, 0), (width, 0), (width, height), (0, height)], max_seg)]
    block = _box(cx, cy, 0.4 * width, 0.2 * height)
    polys.append(_closed_outline(block, max_seg))
    pillars = [(0.2 * width, 0.17 * height), (0.8 * width, 0.17 * height),
               (0.2 * width, 0.83 * height), (0.8 * width, 0.83 * height)]
    for px, py in pillars:
        polys.append(np.array(_box(px, py, 1.0, 1.0)))
    pmap = PriorMap(polys, [True] * len(polys))

    a, b = 0.36 * width, 0.32 * height
    s = np.linspace(0.0, 2.0 * math.pi, frames)
    poses = [Pose2(cx + a * math.cos(u), cy + b * math.sin(u),
                   math.atan2(b * math.cos(u), -a * math.sin(u))) for u in s]
    times = np.arange(frames) / rate
    rng = np.random.default_rng(seed)
    blocked = [(cx - 0.2 * width, cy - 0.1 * height, cx + 0.2 * width, cy + 0.1 * height)]
    blocked += [(px - 0.5, py - 0.5, px + 0.5, py + 0.5) for px, py in pillars]
    occ = _random_occluders(rng, n_occ, times, (1.0, 1.0, width - 1.0, height - 1.0),
                            blocked, occ_radius)
    return Scenario(pmap, sensor, times, poses, occ, noise, seed, kind="loop")


def _corridor(params: dict) -> Scenario:
    length = _pop(params, "length", 40.0)
    width = _pop(params, "width", 4.0)
    speed = _pop(params, "speed", 1.0)
    rate = _pop(params, "rate", 10.0)
    noise = _pop(params, "noise", 0.01)
    margin = _pop(params, "margin", 2.0)
    skew_deg = _pop(params, "skew_deg", 0.05)
    seed = _pop(params, "seed", 0, int)
    n_occ = _pop(params, "occluders", 0, int)
    max_seg = _pop(params, "max_segment", 5.0)
    sensor = _sensor_from(params, max_range=12.0)
    if length <= 2 * margin or width <= 0 or speed <= 0 or rate <= 0 or margin <= 0:
        raise ConfigError("corridor needs length > 2*margin, positive width/speed/rate/margin")
    if abs(skew_deg) >= 5.0:
        raise ConfigError("corridor skew_deg must be below 5 degrees")
    # walls converge symmetrically by skew_deg each; the centerline stays y = 0
    s = 0.5 * length * math.tan(math.radians(skew_deg))
    h = width / 2.0
    corners = [(0.0, -h - s), (length, -h + s), (length, h - s), (0.0, h + s)]
    pmap = PriorMap([_closed_outline(corners, max_seg)], [True])
    step = speed / rate
    frames = int(math.floor((length - 2 * margin) / step + 1e-9)) + 1
    xs = margin + step * np.arange(frames)
    poses = [Pose2(x, 0.0, 0.0) for x in xs]
    times = np.arange(frames) / rate
    rng = np.random.default_rng(seed)
    occ = _random_occluders(rng, n_occ, times, (0.5, -h + 0.5, length - 0.5, h - 0.5), [], 0.3)
    return Scenario(pmap, sensor, times, poses, occ, noise, seed, kind="corridor",
                    info={"length": length, "width": width})


def _stadium(x0, x1, y_lo, y_hi, step):
    """Closed loop: east along y_lo, arc up, west along y_hi, arc down."""
    r = 0.5 * (y_hi - y_lo)
    yc = 0.5 * (y_hi + y_lo)
    straight = x1 - x0
    total = 2 * straight + 2 * math.pi * r
    n = int(round(total / step))
    out = []
    for i in range(n + 1):
        d = total * i / n
        if d <= straight:
            out.append(Pose2(x0 + d, y_lo, 0.0))
        elif d <= straight + math.pi * r:
            a = (d - straight) / r - math.pi / 2
            out.append(Pose2(x1 + r * math.cos(a), yc + r * math.sin(a), a + math.pi / 2))
        elif d <= 2 * straight + math.pi * r:
            e = d - straight - math.pi * r
            out.append(Pose2(x1 - e, y_hi, math.pi))
        else:
            a = (d - 2 * straight - math.pi * r) / r + math.pi / 2
            out.append(Pose2(x0 + r * math.cos(a), yc + r * math.sin(a), a + math.pi / 2))
    return out


def _parking(params: dict) -> Scenario:
    width = _pop(params, "width", 48.0)
    height = _pop(params, "height", 30.0)
    cols = _pop(params, "cols", 8, int)
    spacing = _pop(params, "spacing", 4.0)
    size_x = _pop(params, "size_x", 1.2)
    size_y = _pop(params, "size_y", 2.4)
    removal = _pop(params, "removal_fraction", 0.0)
    added = _pop(params, "added", 0, int)
    speed = _pop(params, "speed", 1.0)
    rate = _pop(params, "rate", 10.0)
    noise = _pop(params, "noise", 0.01)
    seed = _pop(params, "seed", 0, int)
    n_occ = _pop(params, "occluders", 0, int)
    max_seg = _pop(params, "max_segment", 5.0)
    sensor = _sensor_from(params)
    if not 0.0 <= removal < 1.0:
        raise ConfigError("removal_fraction must lie in [0, 1)")
    if cols < 1 or spacing <= size_x or width < 20 or height < 20 or speed <= 0 or rate <= 0:
        raise ConfigError("invalid parking layout")
    rows_y = [0.2 * height, 0.5 * height, 0.8 * height]
    x_first = 0.5 * width - 0.5 * spacing * (cols - 1)
    cars = [(x_first + c * spacing, y) for y in rows_y for c in range(cols)]
    outer = _closed_outline([(0, 0), (width, 0), (width, height), (0, height)], max_seg)
    prior = PriorMap([outer] + [np.array(_box(x, y, size_x, size_y)) for x, y in cars],
                     [True] * (1 + len(cars)))
    rng = np.random.default_rng(seed)
    n_removed = int(round(removal * len(cars)))
    removed = set(int(i) for i in rng.choice(len(cars), size=n_removed, replace=False))
    kept = [c for i, c in enumerate(cars) if i not in removed]
    # extra clutter sits in the row gaps, half way between columns
    extras = []
    for _ in range(added):
        c = int(rng.integers(0, max(1, cols - 1)))
        y = rows_y[int(rng.integers(0, 3))]
        extras.append((x_first + (c + 0.5) * spacing, y))
    world = PriorMap([outer] + [np.array(_box(x, y, size_x, size_y)) for x, y in kept + extras],
                     [True] * (1 + len(kept) + len(extras)))
    y_lo = 0.5 * (rows_y[0] + rows_y[1])
    y_hi = 0.5 * (rows_y[1] + rows_y[2])
    poses = _stadium(x_first, x_first + spacing * (cols - 1), y_lo, y_hi, speed / rate)
    times = np.arange(len(poses)) / rate
    occ = _random_occluders(rng, n_occ, times, (1.0, 1.0, width - 1.0, height - 1.0),
                            [(x - size_x / 2, y - size_y / 2, x + size_x / 2, y + size_y / 2)
                             for x, y in cars], 0.3)
    return Scenario(prior, sensor, times, poses, occ, noise, seed, world=world, kind="parking",
                    info={"removed": sorted(removed), "n_obstacles": len(cars),
                          "added": len(extras)})


_KINDS = {"loop": _loop, "corridor": _corridor, "parking": _parking}


def generate_scenario(kind: str, **params) -> Scenario:
    if kind not in _KINDS:
        raise ConfigError(f"unknown scenario kind {kind!r} (expected one of {sorted(_KINDS)})")
    params = dict(params)
    scen = _KINDS[kind](params)
    if params:
        raise ConfigError(f"unknown {kind} parameters: {sorted(params)}")
    return scen


# ------------------------------------------------------------------ file I/O

def format_scan(scan: Scan) -> str:
    vals = " ".join("-1" if not v else f"{r:.5f}" for r, v in zip(scan.ranges, scan.valid))
    return f"scan {scan.timestamp:.6f} {vals}"


def format_sensor_header(sensor: SensorModel) -> str:
    return (f"# sensor ray_count={sensor.ray_count} fov={sensor.fov!r} "
            f"max_range={sensor.max_range!r} min_range={sensor.min_range!r}")


def read_sensor_header(path) -> Optional[SensorModel]:
    """Sensor model from a scan file's header comment, if present."""
    with open(path, encoding="utf-8") as f:
        for raw in f:
            line = raw.strip()
            if line.startswith("# sensor "):
                kw = dict(item.split("=", 1) for item in line.split()[2:])
                try:
                    return SensorModel(int(kw["ray_count"]), float(kw["fov"]),
                                       float(kw["max_range"]), float(kw["min_range"]))
                except (KeyError, ValueError) as exc:
                    raise ConfigError(f"{path}: bad sensor header ({exc})") from None
            if line and not line.startswith("#"):
                break
    return None


def write_scans(scans: Sequence[Scan], path, sensor: Optional[SensorModel] = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if sensor is not None:
            f.write(format_sensor_header(sensor) + "\n")
        for s in scans:
            f.write(format_scan(s) + "\n")


def read_scans(path) -> list:
    scans = []
    n = None
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] != "scan" or len(parts) < 3:
                raise ConfigError(f"{path}:{lineno}: expected 'scan t r1 ... rN'")
            try:
                vals = np.array([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad number ({exc})") from None
            r = vals[1:]
            if n is not None and len(r) != n:
                raise ConfigError(f"{path}:{lineno}: inconsistent ray count {len(r)} != {n}")
            n = len(r)
            valid = r >= 0.0
            scans.append(Scan(float(vals[0]), np.where(valid, r, np.nan), valid))
    if not scans:
        raise ConfigError(f"{path}: no scans found")
    return scans


def format_pose_line(t: float, p: Pose2) -> str:
    return f"{t:.6f} {p.x:.9f} {p.y:.9f} {p.yaw:.9f}"


def write_trajectory(times, poses, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t, p in zip(times, poses):
            f.write(format_pose_line(t, p) + "\n")


def read_trajectory(path) -> tuple[np.ndarray, list]:
    times, poses = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ConfigError(f"{path}:{lineno}: expected 't x y yaw'")
            try:
                t, x, y, yaw = (float(v) for v in parts)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad number ({exc})") from None
            times.append(t)
            poses.append(Pose2(x, y, yaw))
    return np.array(times), poses
