"""Unbalanced entropic OT between observation and map graphs, with context coupling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from scipy import sparse

from .geometry import LineFeature, PointFeature, Pose2, FeatureGraph

_NEG_INF = -np.inf


@dataclass(frozen=True)
class MatchConfig:
    beta: float = 0.5
    rho: float = 1.0
    epsilon: float = 0.05
    total_mass: Optional[float] = None  # None -> min(|V_x|, |V_y|)
    w_theta: float = 2.0
    w_perp: float = 1.0
    w_par: float = 0.25
    gate_radius: float = 3.0
    top_k: int = 6
    sinkhorn_max_iters: int = 200
    outer_max_iters: int = 5
    sinkhorn_tol: float = 1e-7

    def __post_init__(self):
        if self.beta < 0 or self.rho <= 0 or self.epsilon <= 0:
            raise ValueError("need beta >= 0, rho > 0, epsilon > 0")
        if self.total_mass is not None and self.total_mass <= 0:
            raise ValueError("total_mass must be positive")
        if min(self.w_theta, self.w_perp, self.w_par) < 0:
            raise ValueError("cost weights must be non-negative")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.gate_radius <= 0 or self.sinkhorn_tol <= 0:
            raise ValueError("gate_radius and sinkhorn_tol must be positive")
        if self.sinkhorn_max_iters < 1 or self.outer_max_iters < 0:
            raise ValueError("iteration limits must be positive")


# ---------------------------------------------------------------- costs

def _segment_dist(p, a, d, hl):
    """Distance from points p (..., 2) to segments anchor a, direction d, half-length hl."""
    rel = p - a
    s = np.clip(np.sum(rel * d, axis=-1), -hl, hl)
    foot = a + s[..., None] * d
    diff = p - foot
    return np.hypot(diff[..., 0], diff[..., 1])


def cost_matrix(source: FeatureGraph, target: FeatureGraph, pose: Pose2,
                cfg: MatchConfig) -> tuple:
    """Dense (n_s, n_t) cost and gate-distance matrices; inf marks disallowed pairs."""
    ns, nt = len(source), len(target)
    cost = np.full((ns, nt), np.inf)
    gate = np.full((ns, nt), np.inf)
    if ns == 0 or nt == 0:
        return cost, gate
    R = pose.rotation
    xs = source.positions @ R.T + pose.translation
    ds = source.directions @ R.T
    ys = target.positions
    dt = target.directions
    hl = target.half_lengths
    s_line = source.is_line
    t_line = target.is_line

    P = xs[:, None, :]
    seg = _segment_dist(P, ys[None, :, :], dt[None, :, :], hl[None, :])
    diff = P - ys[None, :, :]
    eu = np.hypot(diff[..., 0], diff[..., 1])

    sp, tp = ~s_line, ~t_line
    pp = sp[:, None] & tp[None, :]
    pl = sp[:, None] & t_line[None, :]
    ll = s_line[:, None] & t_line[None, :]

    cost[pp] = eu[pp]
    gate[pp] = eu[pp]
    cost[pl] = seg[pl]
    gate[pl] = seg[pl]
    if ll.any():
        c = np.abs(ds @ dt.T)
        dth = np.arccos(np.minimum(1.0, c))
        along = np.sum(diff * dt[None, :, :], axis=-1)
        par = np.abs(along)
        perp = np.abs(diff[..., 0] * dt[None, :, 1] - diff[..., 1] * dt[None, :, 0])
        cll = cfg.w_theta * dth ** 2 + cfg.w_perp * perp + cfg.w_par * par
        cost[ll] = cll[ll]
        gate[ll] = seg[ll]
    return cost, gate


def pair_cost(source, target, pose: Pose2, cfg: MatchConfig) -> Optional[float]:
    """Cost of one source/target node pair, None when the type pair is not allowed."""
    if isinstance(source, LineFeature) and isinstance(target, PointFeature):
        return None
    s = FeatureGraph((source,), (), 0)
    t = FeatureGraph((target,), (), 0)
    c = cost_matrix(s, t, pose, cfg)[0][0, 0]
    return None if not math.isfinite(c) else float(c)


# ---------------------------------------------------------------- candidates

@dataclass(frozen=True, eq=False)
class CandidateSet:
    rows: np.ndarray  # sorted by row, then ascending cost
    cols: np.ndarray
    costs: np.ndarray
    n_src: int
    n_tgt: int

    def __len__(self):
        return len(self.rows)

    @property
    def row_ptr(self) -> np.ndarray:
        return np.searchsorted(self.rows, np.arange(self.n_src + 1)).astype(np.int64)

    @property
    def pairs(self) -> list:
        return [(int(i), int(j), float(c)) for i, j, c in zip(self.rows, self.cols, self.costs)]

    @property
    def unmatched_sources(self) -> np.ndarray:
        return np.flatnonzero(np.bincount(self.rows, minlength=self.n_src) == 0)

    @classmethod
    def from_arrays(cls, rows, cols, costs, n_src: int, n_tgt: int) -> CandidateSet:
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        costs = np.asarray(costs, dtype=float)
        if len(costs) and (not np.all(np.isfinite(costs)) or costs.min() < 0):
            raise ValueError("candidate costs must be finite and non-negative")
        if len(set(zip(rows.tolist(), cols.tolist()))) != len(rows):
            raise ValueError("duplicate candidate pair")
        order = np.lexsort((cols, costs, rows))
        return cls(rows[order], cols[order], costs[order], int(n_src), int(n_tgt))

    @classmethod
    def dense(cls, C) -> CandidateSet:
        C = np.asarray(C, dtype=float)
        r, c = np.nonzero(np.isfinite(C))
        return cls.from_arrays(r, c, C[r, c], C.shape[0], C.shape[1])


def build_candidates(source: FeatureGraph, target, pose: Pose2, cfg: MatchConfig) -> CandidateSet:
    tg = getattr(target, "graph", target)
    cost, gate = cost_matrix(source, tg, pose, cfg)
    ns, nt = cost.shape
    rows, cols = [], []
    ok = np.isfinite(cost) & (gate <= cfg.gate_radius)
    for i in range(ns):
        js = np.flatnonzero(ok[i])
        if len(js) == 0:
            continue
        # stable sort on cost keeps the lower target index first on ties
        js = js[np.argsort(cost[i, js], kind="stable")[:cfg.top_k]]
        rows.append(np.full(len(js), i))
        cols.append(js)
    if not rows:
        return CandidateSet(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), ns, nt)
    r = np.concatenate(rows).astype(np.int64)
    c = np.concatenate(cols).astype(np.int64)
    return CandidateSet(r, c, cost[r, c], ns, nt)


# ---------------------------------------------------------------- context term

def _undirected_angle(a, b):
    return np.arccos(np.minimum(1.0, np.abs(np.sum(a * b, axis=-1))))


def relational_penalty(edge_pair, source_nodes, target_nodes) -> float:
    (i, i2), (j, j2) = edge_pair
    a, b = source_nodes[i], source_nodes[i2]
    c, d = target_nodes[j], target_nodes[j2]
    pts = (PointFeature,)
    if all(isinstance(n, pts) for n in (a, b, c, d)):
        ds = float(np.linalg.norm(a.position - b.position))
        dt = float(np.linalg.norm(c.position - d.position))
        return (ds - dt) ** 2
    if all(isinstance(n, LineFeature) for n in (a, b, c, d)):
        ts = float(_undirected_angle(a.direction, b.direction))
        tt = float(_undirected_angle(c.direction, d.direction))
        return (ts - tt) ** 2
    return 0.0


def context_matrix(candidates: CandidateSet, source: FeatureGraph, target: FeatureGraph):
    """Symmetric sparse Q over candidate pairs with Omega = gamma^T Q gamma.

    Both orientations of every source edge are included.
    """
    n = len(candidates)
    edges = source.edge_array
    if n == 0 or len(edges) == 0:
        return sparse.csr_matrix((n, n))
    ea = np.concatenate([edges[:, 0], edges[:, 1]])
    eb = np.concatenate([edges[:, 1], edges[:, 0]])
    ptr = candidates.row_ptr
    cnt = np.diff(ptr)
    na, nb = cnt[ea], cnt[eb]
    tot = na * nb
    keep = tot > 0
    ea, eb, na, nb, tot = ea[keep], eb[keep], na[keep], nb[keep], tot[keep]
    if len(ea) == 0:
        return sparse.csr_matrix((n, n))
    eid = np.repeat(np.arange(len(ea)), tot)
    local = np.arange(int(tot.sum())) - np.repeat(np.cumsum(tot) - tot, tot)
    pa = ptr[ea][eid] + local // nb[eid]
    pb = ptr[eb][eid] + local % nb[eid]
    ja, jb = candidates.cols[pa], candidates.cols[pb]
    sa, sb = ea[eid], eb[eid]

    s_line, t_line = source.is_line, target.is_line
    both_pt = ~s_line[sa] & ~s_line[sb] & ~t_line[ja] & ~t_line[jb]
    both_ln = s_line[sa] & s_line[sb] & t_line[ja] & t_line[jb]
    psi = np.zeros(len(pa))
    xs, ys = source.positions, target.positions
    if both_pt.any():
        m = both_pt
        d1 = np.linalg.norm(xs[sa[m]] - xs[sb[m]], axis=1)
        d2 = np.linalg.norm(ys[ja[m]] - ys[jb[m]], axis=1)
        psi[m] = (d1 - d2) ** 2
    if both_ln.any():
        m = both_ln
        dx, dy = source.directions, target.directions
        t1 = _undirected_angle(dx[sa[m]], dx[sb[m]])
        t2 = _undirected_angle(dy[ja[m]], dy[jb[m]])
        psi[m] = (t1 - t2) ** 2
    nz = psi > 0
    return sparse.csr_matrix((psi[nz], (pa[nz], pb[nz])), shape=(n, n))


# ---------------------------------------------------------------- plans

@dataclass(frozen=True, eq=False)
class TransportPlan:
    candidates: CandidateSet
    gamma: np.ndarray
    empty: bool = False
    objective: float = float("nan")
    outer_iters: int = 0
    sinkhorn_iters: int = 0
    potentials: tuple = field(default=(None, None), repr=False)

    @property
    def entries(self) -> list:
        c = self.candidates
        return [(int(i), int(j), float(g)) for i, j, g in zip(c.rows, c.cols, self.gamma)]

    @property
    def row_marginals(self) -> np.ndarray:
        return np.bincount(self.candidates.rows, weights=self.gamma, minlength=self.candidates.n_src)

    @property
    def column_marginals(self) -> np.ndarray:
        return np.bincount(self.candidates.cols, weights=self.gamma, minlength=self.candidates.n_tgt)

    @property
    def mass(self) -> float:
        return float(self.gamma.sum())


def marginal_masses(n_src: int, n_tgt: int, cfg: MatchConfig, source_weights=None):
    m = cfg.total_mass if cfg.total_mass is not None else float(min(n_src, n_tgt))
    mu = np.full(n_src, m / max(n_src, 1))
    if source_weights is not None:
        mu = mu * np.asarray(source_weights, dtype=float)
    nu = np.full(n_tgt, m / max(n_tgt, 1))
    return mu, nu


def _kl(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    pos = a > 0
    out = np.sum(b) - np.sum(a)
    out += np.sum(a[pos] * np.log(a[pos] / b[pos]))
    return float(out)


def plan_objective(gamma, candidates: CandidateSet, mu, nu, cfg: MatchConfig, Q=None) -> float:
    """<gamma, C> + beta Omega + rho (KL rows + KL cols) + eps sum gamma (log gamma - 1)."""
    gamma = np.asarray(gamma, dtype=float)
    obj = float(gamma @ candidates.costs)
    if Q is not None and cfg.beta > 0:
        obj += cfg.beta * float(gamma @ (Q @ gamma))
    a = np.bincount(candidates.rows, weights=gamma, minlength=candidates.n_src)
    b = np.bincount(candidates.cols, weights=gamma, minlength=candidates.n_tgt)
    obj += cfg.rho * (_kl(a, mu) + _kl(b, nu))
    pos = gamma > 0
    obj += cfg.epsilon * float(np.sum(gamma[pos] * (np.log(gamma[pos]) - 1.0)))
    return obj


@numba.njit(cache=True)
def _sinkhorn_kernel(row_ptr, cols, col_ptr, col_perm, rows, cost, log_mu, log_nu,
                     eps, tau, f, g, max_iter, tol):
    n_src = len(row_ptr) - 1
    n_tgt = len(col_ptr) - 1
    a_prev = np.zeros(n_src)
    b_prev = np.zeros(n_tgt)
    it = 0
    for it in range(1, max_iter + 1):
        delta = 0.0
        for i in range(n_src):
            lo, hi = row_ptr[i], row_ptr[i + 1]
            if lo == hi:
                continue
            mx = -np.inf
            for p in range(lo, hi):
                v = (g[cols[p]] - cost[p]) / eps
                if v > mx:
                    mx = v
            s = 0.0
            for p in range(lo, hi):
                s += np.exp((g[cols[p]] - cost[p]) / eps - mx)
            lse = mx + np.log(s)
            f[i] = tau * eps * (log_mu[i] - lse)
            a = np.exp(f[i] / eps + lse)
            d = abs(a - a_prev[i])
            if d > delta:
                delta = d
            a_prev[i] = a
        for j in range(n_tgt):
            lo, hi = col_ptr[j], col_ptr[j + 1]
            if lo == hi:
                continue
            mx = -np.inf
            for q in range(lo, hi):
                p = col_perm[q]
                v = (f[rows[p]] - cost[p]) / eps
                if v > mx:
                    mx = v
            s = 0.0
            for q in range(lo, hi):
                p = col_perm[q]
                s += np.exp((f[rows[p]] - cost[p]) / eps - mx)
            lse = mx + np.log(s)
            g[j] = tau * eps * (log_nu[j] - lse)
            b = np.exp(g[j] / eps + lse)
            d = abs(b - b_prev[j])
            if d > delta:
                delta = d
            b_prev[j] = b
        if delta < tol:
            break
    return it


def sinkhorn_uot(candidates: CandidateSet, cost, mu, nu, cfg: MatchConfig, f=None, g=None):
    """Log-domain unbalanced Sinkhorn on the sparse support; returns (gamma, f, g, iters)."""
    c = candidates
    f = np.zeros(c.n_src) if f is None else np.array(f, dtype=float)
    g = np.zeros(c.n_tgt) if g is None else np.array(g, dtype=float)
    if len(c) == 0:
        return np.zeros(0), f, g, 0
    col_perm = np.argsort(c.cols, kind="stable").astype(np.int64)
    col_ptr = np.searchsorted(c.cols[col_perm], np.arange(c.n_tgt + 1)).astype(np.int64)
    tau = cfg.rho / (cfg.rho + cfg.epsilon)
    with np.errstate(divide="ignore"):
        log_mu = np.log(mu)
        log_nu = np.log(nu)
    it = _sinkhorn_kernel(c.row_ptr, c.cols, col_ptr, col_perm, c.rows,
                          np.ascontiguousarray(cost, dtype=float), log_mu, log_nu,
                          cfg.epsilon, tau, f, g, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol)
    gamma = np.exp((f[c.rows] + g[c.cols] - cost) / cfg.epsilon)
    return gamma, f, g, int(it)


def solve_uot(candidates: CandidateSet, source: FeatureGraph, target,
              cfg: MatchConfig = MatchConfig(), warm: Optional[TransportPlan] = None,
              Q=None) -> TransportPlan:
    tg = getattr(target, "graph", target)
    c = candidates
    if len(c) == 0:
        return TransportPlan(c, np.zeros(0), empty=True, objective=float("nan"))
    mu, nu = marginal_masses(c.n_src, c.n_tgt, cfg, source.weights if len(source) else None)
    if Q is None and cfg.beta > 0:
        Q = context_matrix(c, source, tg)
    f0 = g0 = None
    if warm is not None and warm.potentials[0] is not None \
            and len(warm.potentials[0]) == c.n_src and len(warm.potentials[1]) == c.n_tgt:
        f0, g0 = warm.potentials
    gamma, f, g, iters = sinkhorn_uot(c, c.costs, mu, nu, cfg, f0, g0)
    total = iters
    best = gamma
    best_obj = plan_objective(gamma, c, mu, nu, cfg, Q)
    best_fg = (f.copy(), g.copy())
    outer = 0
    if cfg.beta > 0 and Q is not None and Q.nnz > 0:
        prev = gamma
        for outer in range(1, cfg.outer_max_iters + 1):
            eff = c.costs + cfg.beta * 2.0 * (Q @ prev)
            gamma, f, g, iters = sinkhorn_uot(c, eff, mu, nu, cfg, f, g)
            total += iters
            obj = plan_objective(gamma, c, mu, nu, cfg, Q)
            if obj < best_obj:
                best, best_obj, best_fg = gamma, obj, (f.copy(), g.copy())
            if np.max(np.abs(gamma - prev)) < cfg.sinkhorn_tol:
                break
            prev = gamma
    return TransportPlan(c, best, False, best_obj, outer, total, best_fg)


def greedy_association(candidates: CandidateSet, source: FeatureGraph, target,
                       cfg: MatchConfig = MatchConfig()) -> TransportPlan:
    """Nearest-neighbor association: each source keeps its cheapest candidate with mass mu_i."""
    c = candidates
    if len(c) == 0:
        return TransportPlan(c, np.zeros(0), empty=True)
    mu, _ = marginal_masses(c.n_src, c.n_tgt, cfg, source.weights if len(source) else None)
    gamma = np.zeros(len(c))
    ptr = c.row_ptr
    for i in range(c.n_src):
        if ptr[i] < ptr[i + 1]:
            gamma[ptr[i]] = mu[i]  # rows are cost-sorted
    return TransportPlan(c, gamma, False)


def format_plan(plan: TransportPlan) -> str:
    c = plan.candidates
    return "".join(f"{i} {j} {g:.9g} {k:.9g}\n"
                   for i, j, g, k in zip(c.rows, c.cols, plan.gamma, c.costs))
