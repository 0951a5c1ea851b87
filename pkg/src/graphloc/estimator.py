"""Degeneracy-aware Gauss-Newton refinement and the per-scan tracking pipeline."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .frontend import FrontendConfig, register
from .geometry import (FeatureGraph, Pose2, Twist2, between, compose, inverse, se2_exp,
                       se2_log)
from .matching import (MatchConfig, TransportPlan, build_candidates, greedy_association,
                       solve_uot)
from .prior_map import MapGraph, PriorMap, SensorModel, raycast_visible
from .scan_sim import Scan

_JPERP = np.array([[0.0, -1.0], [1.0, 0.0]])
_ABS_FLOOR = 1e-6
_GAMMA_MIN = 1e-9


@dataclass(frozen=True)
class EstimatorConfig:
    tau_lambda_rel: float = 0.02
    lambda_r: Optional[float] = None  # None -> 1e6 * max(lambda_1, 1)
    huber_delta: float = 0.1
    max_gn_iters: int = 6
    buffer_capacity: int = 50
    step_tol: float = 1e-4
    coast_limit: int = 10
    delayed: bool = True
    association: str = "uot"  # or "nn"
    rematch_each_iter: bool = True
    # length (m) that converts yaw into translation units before the eigen-test;
    # None -> RMS lever arm of the matched features, 0 -> raw H
    yaw_scale: Optional[float] = None
    # a pair enters the normal equations only if its mass is at least this
    # fraction of the strongest mass in its source row (0 -> every pair)
    min_rel_mass: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.tau_lambda_rel < 1.0):
            raise ValueError("tau_lambda_rel must lie in (0, 1)")
        if self.lambda_r is not None and self.lambda_r <= 0:
            raise ValueError("lambda_r must be positive")
        if self.huber_delta <= 0 or self.max_gn_iters < 1 or self.buffer_capacity < 1:
            raise ValueError("invalid estimator limits")
        if self.yaw_scale is not None and self.yaw_scale < 0:
            raise ValueError("yaw_scale must be non-negative")
        if not 0.0 <= self.min_rel_mass <= 1.0:
            raise ValueError("min_rel_mass must lie in [0, 1]")
        if self.association not in ("uot", "nn"):
            raise ValueError("association must be 'uot' or 'nn'")


@dataclass(frozen=True, eq=False)
class NormalSystem:
    H: np.ndarray
    g: np.ndarray
    residual_count: int = 0
    total_weight: float = 0.0
    lever_arm: float = 0.0  # weighted RMS distance of matched source features from the sensor

    @property
    def empty(self) -> bool:
        return self.residual_count == 0


@dataclass(frozen=True, eq=False)
class DegeneracyState:
    eigenvalues: np.ndarray  # descending
    U: np.ndarray
    weak_set: frozenset  # 0-based mode indices

    @property
    def degenerate(self) -> bool:
        return bool(self.weak_set)


@dataclass
class EvidenceBuffer:
    capacity: int = 50
    entries: deque = field(default_factory=deque)
    dropped: int = 0

    def push(self, H, g, t: float) -> None:
        if len(self.entries) >= self.capacity:
            self.entries.popleft()
            self.dropped += 1
        self.entries.append((np.array(H, dtype=float), np.array(g, dtype=float), float(t)))

    def __len__(self):
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()


def huber_weight(norm: float, delta: float) -> float:
    return 1.0 if norm <= delta else delta / norm


def residual_jacobian(kind: str, source, target, pose: Pose2):
    """Residual r and Jacobian J with respect to the right increment P * exp(dxi)."""
    R = pose.rotation
    t = pose.translation
    if kind == "pp":
        p = np.asarray(source.position)
        r = R @ p + t - target.position
        J = np.zeros((2, 3))
        J[:, :2] = R
        J[:, 2] = R @ _JPERP @ p
        return r, J
    n = target.normal
    if kind == "pl":
        p = np.asarray(source.position)
        r = np.array([n @ (R @ p + t - target.anchor)])
        J = np.zeros((1, 3))
        J[0, :2] = n @ R
        J[0, 2] = n @ R @ _JPERP @ p
        return r, J
    if kind == "ll":
        q = np.asarray(source.anchor)
        off = n @ (R @ q + t - target.anchor)
        ds = R @ source.direction
        ang = math.atan2(ds[1], ds[0]) - math.atan2(target.direction[1], target.direction[0])
        # direction sign is arbitrary: wrap into (-pi/2, pi/2]
        ang = ang - math.pi * math.floor((ang + math.pi / 2) / math.pi)
        if ang <= -math.pi / 2:
            ang += math.pi
        r = np.array([off, ang])
        J = np.zeros((2, 3))
        J[0, :2] = n @ R
        J[0, 2] = n @ R @ _JPERP @ q
        J[1, 2] = 1.0
        return r, J
    raise ValueError(f"unknown residual kind {kind!r}")


def _kind(s_line: bool, t_line: bool) -> Optional[str]:
    if not s_line and not t_line:
        return "pp"
    if not s_line and t_line:
        return "pl"
    if s_line and t_line:
        return "ll"
    return None


def build_normal_system(plan: TransportPlan, source: FeatureGraph, target, pose: Pose2,
                        cfg: EstimatorConfig = EstimatorConfig()) -> NormalSystem:
    tg = getattr(target, "graph", target)
    H = np.zeros((3, 3))
    g = np.zeros(3)
    if plan.empty or len(plan.gamma) == 0:
        return NormalSystem(H, g, 0, 0.0)
    c = plan.candidates
    sw, tw = source.weights, tg.weights
    sl, tl = source.is_line, tg.is_line
    count = 0
    total = 0.0
    arm2 = 0.0
    gam = plan.gamma
    row_max = np.zeros(c.n_src)
    np.maximum.at(row_max, c.rows, gam)
    keep = (gam > _GAMMA_MIN) & (gam >= cfg.min_rel_mass * row_max[c.rows])
    for p in np.flatnonzero(keep):
        i, j = int(c.rows[p]), int(c.cols[p])
        kind = _kind(bool(sl[i]), bool(tl[j]))
        if kind is None:
            continue
        r, J = residual_jacobian(kind, source.nodes[i], tg.nodes[j], pose)
        w = plan.gamma[p] * sw[i] * tw[j] * huber_weight(float(np.linalg.norm(r)), cfg.huber_delta)
        H += w * (J.T @ J)
        g += w * (J.T @ r)
        count += 1
        total += w
        arm2 += w * float(source.positions[i] @ source.positions[i])
    H = 0.5 * (H + H.T)
    arm = math.sqrt(arm2 / total) if total > 0 else 0.0
    return NormalSystem(H, g, count, total, arm)


def detect_weak_directions(H, cfg: EstimatorConfig = EstimatorConfig()) -> DegeneracyState:
    H = 0.5 * (np.asarray(H, dtype=float) + np.asarray(H, dtype=float).T)
    w, U = np.linalg.eigh(H)
    w, U = w[::-1], U[:, ::-1]
    lam = np.maximum(w, 0.0)
    if lam[0] < _ABS_FLOOR:
        weak = frozenset(range(3))
    else:
        weak = frozenset(int(k) for k in range(3) if lam[k] < cfg.tau_lambda_rel * lam[0])
    return DegeneracyState(lam, np.ascontiguousarray(U), weak)


def _damping(deg: DegeneracyState, cfg: EstimatorConfig) -> float:
    if cfg.lambda_r is not None:
        return cfg.lambda_r
    return 1e6 * max(float(deg.eigenvalues[0]), 1.0)


def _safe_solve(H, g):
    """-H^-1 g, with a small Tikhonov floor when H is numerically singular."""
    w = np.linalg.eigvalsh(H)
    top = max(float(np.max(np.abs(w))), 1.0)
    if float(np.min(w)) <= 1e-12 * top:
        Hf = H + 1e-9 * top * np.eye(3)
        return -np.linalg.solve(Hf, g), True
    return -np.linalg.solve(H, g), False


def solve_masked(H, g, deg: DegeneracyState, cfg: EstimatorConfig = EstimatorConfig()):
    """Damped solve -(H + lambda_r (I - M))^-1 g; returns (Twist2, flagged)."""
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    if not deg.weak_set:
        dx, flagged = _safe_solve(H, g)
        return Twist2.from_array(dx), flagged
    lam_r = _damping(deg, cfg)
    U, lam = deg.U, deg.eigenvalues
    d = np.array([lam[k] + (lam_r if k in deg.weak_set else 0.0) for k in range(3)])
    flagged = bool(np.any(d <= 0))
    d = np.where(d <= 0, 1e-9 * max(float(lam[0]), 1.0), d)
    dx = -U @ ((U.T @ g) / d)
    return Twist2.from_array(dx), flagged


def release_delayed(H, g, buffer: EvidenceBuffer):
    """Solve with all buffered evidence added; returns (Twist2, buffer, flagged, Hbar)."""
    Hb = None
    gb = None
    for Hk, gk, _ in buffer.entries:
        if Hb is None:
            Hb, gb = Hk.copy(), gk.copy()
        else:
            Hb += Hk
            gb += gk
    if Hb is None:
        Hbar, gbar = np.array(H, dtype=float), np.array(g, dtype=float)
    else:
        Hbar, gbar = Hb + H, gb + g
    dx, flagged = _safe_solve(Hbar, gbar)
    buffer.clear()
    return Twist2.from_array(dx), buffer, flagged, Hbar


# ---------------------------------------------------------------- tracker

@dataclass
class TrackerState:
    pose_prev: Pose2
    pose_prev2: Pose2
    buffer: EvidenceBuffer
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    coast_run: int = 0
    lost: bool = False

    @classmethod
    def from_seed(cls, pose: Pose2, prev: Optional[Pose2] = None,
                  estimator: EstimatorConfig = EstimatorConfig(),
                  match: MatchConfig = MatchConfig(),
                  frontend: FrontendConfig = FrontendConfig()) -> TrackerState:
        return cls(pose, pose if prev is None else prev,
                   EvidenceBuffer(estimator.buffer_capacity), estimator, match, frontend)


@dataclass
class StepDiagnostics:
    timestamp: float
    pose: Pose2
    eigenvalues: np.ndarray
    n_degenerate: int
    buffer_len: int
    plan_mass: float
    iterations: int
    status: str  # ok | degenerate | coast | lost
    n_features: int = 0
    n_visible: int = 0
    released: bool = False
    dropped: int = 0
    increment: Optional[Pose2] = None

    def format(self) -> str:
        lam = self.eigenvalues
        p = self.pose
        return (f"{self.timestamp:.6f} {p.x:.6f} {p.y:.6f} {p.yaw:.6f} "
                f"{lam[0]:.6g} {lam[1]:.6g} {lam[2]:.6g} {self.n_degenerate} "
                f"{self.buffer_len} {self.plan_mass:.6g} {self.iterations} {self.status}")


def _yaw_scaling(system: NormalSystem, cfg: EstimatorConfig) -> np.ndarray:
    """Diagonal S with dxi = S eta, so that eta's yaw component is in meters."""
    L = system.lever_arm if cfg.yaw_scale is None else cfg.yaw_scale
    if L <= 0:
        return np.ones(3)
    return np.array([1.0, 1.0, 1.0 / max(L, 1e-3)])


def predict_cv(state: TrackerState) -> Pose2:
    twist = se2_log(between(state.pose_prev2, state.pose_prev))
    return compose(state.pose_prev, se2_exp(twist))


def _associate(S, visible, pose, state, warm):
    cand = build_candidates(S, visible, pose, state.match)
    if state.estimator.association == "nn":
        return greedy_association(cand, S, visible, state.match)
    return solve_uot(cand, S, visible, state.match, warm=warm)


def _advance(state: TrackerState, pose: Pose2) -> Pose2:
    inc = between(state.pose_prev, pose)
    state.pose_prev2, state.pose_prev = state.pose_prev, pose
    return inc


def track_step(state: TrackerState, scan: Scan, pmap: PriorMap, map_graph: MapGraph,
               sensor: SensorModel) -> tuple:
    cfg = state.estimator
    pred = predict_cv(state)
    S = register(scan, sensor, state.frontend)
    visible = raycast_visible(pmap, map_graph, pred, sensor)
    zeros = np.zeros(3)

    def coast(n_feat, n_vis):
        state.coast_run += 1
        if state.coast_run > cfg.coast_limit:
            state.lost = True
        status = "lost" if state.lost else "coast"
        inc = _advance(state, pred)
        return pred, StepDiagnostics(scan.timestamp, pred, zeros, 0, len(state.buffer), 0.0, 0,
                                     status, n_feat, n_vis, False, state.buffer.dropped, inc)

    if visible.empty or len(S) == 0:
        return coast(len(S), len(visible))

    pose = pred
    plan: Optional[TransportPlan] = None
    deg = None
    system = None
    released = False
    iters = 0
    for iters in range(1, cfg.max_gn_iters + 1):
        if plan is None or cfg.rematch_each_iter:
            plan = _associate(S, visible, pose, state, plan)
        if plan.empty:
            break
        system = build_normal_system(plan, S, visible, pose, cfg)
        if system.empty:
            break
        sc = _yaw_scaling(system, cfg)
        Hs, gs = sc[:, None] * system.H * sc[None, :], sc * system.g
        deg = detect_weak_directions(Hs, cfg)
        if cfg.delayed and deg.degenerate:
            eta, _ = solve_masked(Hs, gs, deg, cfg)
            step = Twist2.from_array(sc * eta.as_array())
        elif cfg.delayed and len(state.buffer):
            step, _, _, _ = release_delayed(system.H, system.g, state.buffer)
            released = True
        else:
            step = Twist2.from_array(_safe_solve(system.H, system.g)[0])
        pose = compose(pose, se2_exp(step))
        if max(abs(step.dx), abs(step.dy)) < cfg.step_tol and abs(step.dphi) < cfg.step_tol:
            break

    if plan is None or plan.empty or system is None or system.empty:
        return coast(len(S), len(visible))

    state.coast_run = 0
    if cfg.delayed and deg.degenerate:
        # one record per degenerate frame, from its final linearization
        state.buffer.push(system.H, system.g, scan.timestamp)
    status = "degenerate" if deg.degenerate else "ok"
    if released:
        # the release removes drift accumulated over the buffered stretch; re-anchor
        # the history so the one-off jump does not enter the next velocity estimate
        twist = se2_exp(se2_log(between(state.pose_prev2, state.pose_prev)))
        state.pose_prev = compose(pose, inverse(twist))
    inc = _advance(state, pose)
    diag = StepDiagnostics(scan.timestamp, pose, deg.eigenvalues, len(deg.weak_set),
                           len(state.buffer), plan.mass, iters, status, len(S), len(visible),
                           released, state.buffer.dropped, inc)
    return pose, diag
