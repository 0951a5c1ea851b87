"""Trajectories, ATE metrics and tracking runs over scan sequences."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, apply_sensor
from .estimator import EvidenceBuffer, TrackerState, track_step
from .geometry import Pose2
from .prior_map import PriorMap, SensorModel, map_to_graph
from .scan_sim import Scan, Scenario, simulate_all


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    poses: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        if len(t) != len(self.poses):
            raise ValueError("one pose per timestamp required")
        if np.any(np.diff(t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 2))
        return np.array([[p.x, p.y] for p in self.poses])

    @property
    def samples(self) -> list:
        return list(zip(self.times.tolist(), self.poses))


@dataclass(frozen=True, eq=False)
class AteReport:
    max_cm: float
    mean_cm: float
    rmse_cm: float
    per_frame_errors: np.ndarray  # meters

    def format(self) -> str:
        return (f"frames {len(self.per_frame_errors)}\n"
                f"max_cm {self.max_cm:.6f}\nmean_cm {self.mean_cm:.6f}\n"
                f"rmse_cm {self.rmse_cm:.6f}\n")


def _pair(est: Trajectory, truth: Trajectory):
    if len(est) == 0 or len(truth) == 0:
        raise EvaluationError("empty trajectory")
    if len(truth) > 1:
        half = 0.5 * float(np.median(np.diff(truth.times)))
    else:
        half = 1e-9
    idx = np.searchsorted(truth.times, est.times)
    lo = np.clip(idx - 1, 0, len(truth) - 1)
    hi = np.clip(idx, 0, len(truth) - 1)
    pick = np.where(np.abs(truth.times[lo] - est.times) <= np.abs(truth.times[hi] - est.times),
                    lo, hi)
    ok = np.abs(truth.times[pick] - est.times) <= half
    if not ok.any():
        raise EvaluationError("no overlapping timestamps between trajectories")
    return np.flatnonzero(ok), pick[ok]


def rigid_align_2d(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotation R and translation t with R src + t ~ dst."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    Hm = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(Hm)
    D = np.diag([1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def compute_ate(estimated: Trajectory, truth: Trajectory, align: bool = False) -> AteReport:
    ei, ti = _pair(estimated, truth)
    a = estimated.positions[ei]
    b = truth.positions[ti]
    if align and len(a) >= 2:
        R, t = rigid_align_2d(a, b)
        a = a @ R.T + t
    err = np.linalg.norm(a - b, axis=1)
    return AteReport(100.0 * float(err.max()), 100.0 * float(err.mean()),
                     100.0 * math.sqrt(float(np.mean(err ** 2))), err)


@dataclass
class TrackingResult:
    trajectory: Trajectory
    diagnostics: list = field(default_factory=list)
    latencies: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lost: bool = False

    @property
    def lost_frames(self) -> int:
        return sum(1 for d in self.diagnostics if d.status == "lost")

    def format_diagnostics(self) -> str:
        return "".join(d.format() + "\n" for d in self.diagnostics)


def run_tracking(scans: Sequence[Scan], pmap: PriorMap, sensor: SensorModel,
                 seeds: Sequence[Pose2], cfg: Optional[RunConfig] = None) -> TrackingResult:
    """Track a scan sequence; seeds are the known poses of the first one or two scans."""
    cfg = cfg or RunConfig()
    if not 1 <= len(seeds) <= 2:
        raise ValueError("need one or two seed poses")
    if len(scans) < len(seeds):
        raise ValueError("fewer scans than seed poses")
    sensor = apply_sensor(sensor, cfg.sensor)
    if sensor.ray_count != len(scans[0]):
        raise ValueError(f"sensor has {sensor.ray_count} rays but scans have {len(scans[0])}")
    graph = map_to_graph(pmap)
    prev2 = seeds[0]
    prev = seeds[-1]
    state = TrackerState(prev, prev2, EvidenceBuffer(cfg.estimator.buffer_capacity),
                         cfg.estimator, cfg.match, cfg.frontend)
    poses = list(seeds)
    diags = []
    lat = []
    for scan in scans[len(seeds):]:
        t0 = time.perf_counter()
        pose, diag = track_step(state, scan, pmap, graph, sensor)
        lat.append(time.perf_counter() - t0)
        poses.append(pose)
        diags.append(diag)
    traj = Trajectory(np.array([s.timestamp for s in scans]), poses)
    return TrackingResult(traj, diags, np.array(lat), state.lost)


def run_scenario(scenario: Scenario, cfg: Optional[RunConfig] = None,
                 scans: Optional[Sequence[Scan]] = None) -> tuple:
    """Simulate (unless scans are given) and track; seeds are the first two true poses."""
    scans = simulate_all(scenario) if scans is None else scans
    result = run_tracking(scans, scenario.map, scenario.sensor,
                          scenario.poses[:2], cfg)
    truth = Trajectory(scenario.times, scenario.poses)
    return result, compute_ate(result.trajectory, truth)
