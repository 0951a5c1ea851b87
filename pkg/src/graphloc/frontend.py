"""Scan -> observation graph: edge points, sector lines, occlusion hypotheses, fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import (FeatureGraph, LineFeature, PointFeature, build_knn_graph,
                       line_angle, point_segment_distance)
from .prior_map import SensorModel
from .scan_sim import Scan

OBSERVED = "observed"
INFERRED_CORNER = "inferred_corner"
INFERRED_ORTHOGONAL = "inferred_orthogonal"


@dataclass(frozen=True)
class FrontendConfig:
    curvature_window: int = 5
    edge_threshold: float = 0.01
    max_points: int = 40
    sectors: int = 16
    gap_threshold: float = 0.5
    min_points: int = 8
    max_rms: float = 0.03
    merge_angle_deg: float = 5.0
    merge_offset: float = 0.10
    stable_support: int = 12
    junction_min_deg: float = 30.0
    extension_limit: float = 1.0
    parallel_deg: float = 10.0
    support_distance: float = 0.10
    observed_weight: float = 1.0
    inferred_weight: float = 0.3
    manhattan: bool = False
    refine_corners: bool = True
    min_corner_angle_deg: float = 20.0  # half-window fits must bend at least this much
    knn_k: int = 4


@dataclass(frozen=True)
class SectorFit:
    sector_index: int
    inlier_ray_span: tuple  # (first, last) ray index, inclusive
    direction: np.ndarray
    anchor: np.ndarray
    rms_residual: float
    inliers: np.ndarray  # positions into the compressed valid-point sequence


@dataclass(frozen=True)
class HypothesisFeature:
    base: object
    kind: str
    weight: float


def _valid_sequence(scan: Scan, sensor: SensorModel):
    """Valid rays as a compressed sequence: (ray indices, points, ranges)."""
    idx = np.flatnonzero(scan.valid)
    pts = scan.points(sensor)[idx]
    return idx, pts, scan.ranges[idx]


def _breaks(ranges: np.ndarray, wrap: bool, gap: float) -> np.ndarray:
    """breaks[k] is True when sequence positions k and k+1 are not contiguous."""
    n = len(ranges)
    if n == 0:
        return np.zeros(0, dtype=bool)
    nxt = np.roll(ranges, -1)
    b = np.abs(nxt - ranges) > gap
    if not wrap:
        b[-1] = True
    return b


def tls_fit(pts: np.ndarray):
    """Total least squares line: (centroid, unit direction, rms orthogonal residual)."""
    c = pts.mean(axis=0)
    q = pts - c
    cov = q.T @ q
    w, v = np.linalg.eigh(cov)
    d = v[:, 1]
    n = v[:, 0]
    rms = math.sqrt(max(0.0, float(w[0])) / len(pts))
    return c, d, n, rms


def _curvature(pts, ranges, breaks, w, wrap):
    n = len(pts)
    score = np.zeros(n)
    ok = np.zeros(n, dtype=bool)
    if n < 2 * w + 1:
        return score, ok
    offs = [o for o in range(-w, w + 1) if o != 0]
    if wrap:
        cb = np.concatenate([[0], np.cumsum(np.concatenate([breaks, breaks, breaks]))])
        k = np.arange(n) + n
        ok = (cb[k + w] - cb[k - w]) == 0
        acc = np.zeros((n, 2))
        for o in offs:
            acc += np.roll(pts, -o, axis=0) - pts
    else:
        cb = np.concatenate([[0], np.cumsum(breaks)])
        k = np.arange(n)
        inner = (k >= w) & (k < n - w)
        kk = np.clip(k, w, n - w - 1)
        ok = inner & ((cb[kk + w] - cb[kk - w]) == 0)
        acc = np.zeros((n, 2))
        for o in offs:
            acc += pts[np.clip(k + o, 0, n - 1)] - pts
    score = np.hypot(acc[:, 0], acc[:, 1]) / (2 * w * ranges)
    score[~ok] = 0.0
    return score, ok


def _intersect(a, d, b, e):
    """Parameters (s, u) with a + s d = b + u e, or None when parallel."""
    den = d[0] * (-e[1]) - d[1] * (-e[0])
    if abs(den) < 1e-12:
        return None
    r = b - a
    s = (r[0] * (-e[1]) - r[1] * (-e[0])) / den
    u = (d[0] * r[1] - d[1] * r[0]) / den
    return s, u


def _half_windows(pts, k, w, wrap):
    n = len(pts)
    if wrap:
        left = pts[[(k - o) % n for o in range(1, w + 1)]]
        right = pts[[(k + o) % n for o in range(1, w + 1)]]
    else:
        left, right = pts[k - w:k], pts[k + 1:k + w + 1]
    return left, right


def _corner_point(pts, k, w, wrap, min_angle, refine):
    """Corner estimate at sequence position k, or None when the two sides are collinear."""
    left, right = _half_windows(pts, k, w, wrap)
    ca, da, _, _ = tls_fit(left)
    cb, db, _, _ = tls_fit(right)
    if line_angle(da, db) < min_angle:
        return None
    if not refine:
        return pts[k]
    st = _intersect(ca, da, cb, db)
    if st is None:
        return pts[k]
    x = ca + st[0] * da
    spacing = float(np.linalg.norm(pts[k] - left[0])) + 1e-9
    if np.linalg.norm(x - pts[k]) > 2.0 * spacing:
        return pts[k]
    return x


def extract_short_features(scan: Scan, sensor: SensorModel,
                           cfg: FrontendConfig = FrontendConfig()) -> list:
    idx, pts, ranges = _valid_sequence(scan, sensor)
    n = len(pts)
    w = cfg.curvature_window
    wrap = sensor.full_circle and n > 0
    brk = _breaks(ranges, wrap, cfg.gap_threshold)
    score, ok = _curvature(pts, ranges, brk, w, wrap)
    if n == 0:
        return []
    cand = []
    for k in np.flatnonzero(ok & (score > cfg.edge_threshold)):
        if wrap:
            nb = [(k + o) % n for o in range(-w, w + 1)]
        else:
            nb = range(max(0, k - w), min(n, k + w + 1))
        if all(score[k] >= score[j] for j in nb):
            cand.append(int(k))
    cand.sort(key=lambda k: (-score[k], k))
    chosen = []
    for k in cand:
        if len(chosen) >= cfg.max_points:
            break
        close = False
        for c in chosen:
            d = abs(k - c)
            if wrap:
                d = min(d, n - d)
            if d <= w:
                close = True
                break
        if not close:
            chosen.append(k)
    chosen.sort()
    out = []
    min_angle = math.radians(cfg.min_corner_angle_deg)
    for k in chosen:
        p = _corner_point(pts, k, w, wrap, min_angle, cfg.refine_corners)
        if p is not None:
            out.append(PointFeature(p, cfg.observed_weight))
    return out


def _fit_group(pts, members, cfg, out):
    """Fit one contiguous run, splitting where it bends until every piece is straight."""
    stack = [members]
    while stack:
        m = stack.pop()
        if len(m) < cfg.min_points:
            continue
        c, d, nrm, rms = tls_fit(pts[m])
        if rms < cfg.max_rms:
            # one trimming pass drops stragglers (e.g. rays grazing a corner)
            keep = np.abs((pts[m] - c) @ nrm) <= max(3.0 * rms, 1e-6)
            if not keep.all() and keep.sum() >= cfg.min_points:
                m = m[keep]
                c, d, nrm, rms = tls_fit(pts[m])
            out.append((m, c, d, rms))
            continue
        # split where the run bends most: farthest point from the end-to-end chord
        a, b = pts[m[0]], pts[m[-1]]
        ch = b - a
        L = float(np.hypot(ch[0], ch[1]))
        if L > 1e-9:
            res = np.abs((pts[m] - a) @ np.array([-ch[1], ch[0]]) / L)
        else:
            res = np.abs((pts[m] - c) @ nrm)
        j = int(np.argmax(res[1:-1])) + 1
        stack.append(m[j:])
        stack.append(m[:j])


def sector_fits(scan: Scan, sensor: SensorModel, cfg: FrontendConfig = FrontendConfig()):
    idx, pts, ranges = _valid_sequence(scan, sensor)
    n = len(pts)
    if n == 0:
        return [], pts
    wrap = sensor.full_circle
    brk = _breaks(ranges, wrap, cfg.gap_threshold)
    sec = (idx * cfg.sectors) // len(scan)
    fits = []
    start = 0
    for k in range(n):
        last = k == n - 1
        if last or brk[k] or sec[k + 1] != sec[k]:
            members = np.arange(start, k + 1)
            raw = []
            _fit_group(pts, members, cfg, raw)
            raw.sort(key=lambda r: r[0][0])
            for m, c, d, rms in raw:
                fits.append(SectorFit(int(sec[m[0]]), (int(idx[m[0]]), int(idx[m[-1]])),
                                      d, c, rms, m))
            start = k + 1
    return fits, pts


def _mergeable(a: SectorFit, b: SectorFit, cfg: FrontendConfig, sectors: int, wrap: bool) -> bool:
    ds = b.sector_index - a.sector_index
    if wrap:
        ds %= sectors
    if ds not in (0, 1):
        return False
    if line_angle(a.direction, b.direction) >= math.radians(cfg.merge_angle_deg):
        return False
    na = np.array([-a.direction[1], a.direction[0]])
    nb = np.array([-b.direction[1], b.direction[0]])
    off = max(abs(float((b.anchor - a.anchor) @ na)), abs(float((a.anchor - b.anchor) @ nb)))
    return off < cfg.merge_offset


def _trim(pts, m, iters: int = 10):
    """Refit and drop points beyond 3 rms until the member set is stable."""
    for _ in range(iters):
        c, d, nrm, rms = tls_fit(pts[m])
        keep = np.abs((pts[m] - c) @ nrm) <= max(3.0 * rms, 1e-6)
        if keep.all() or keep.sum() < 2:
            break
        m = m[keep]
    return m


def _grow(pts, m, brk, wrap):
    """Extend a chain over contiguous neighbours that sit on its line.

    Sector boundaries leave end rays in fragments too small to fit or split
    them off with the neighbouring wall; growing over the full collinear run
    makes the line independent of where the boundaries fall.
    """
    n = len(pts)
    c, d, nrm, rms = tls_fit(pts[m])
    tol = max(3.0 * rms, 1e-6)
    used = set(m.tolist())
    head, tail = [], []
    for step, out in ((-1, head), (1, tail)):
        k = int(m[0] if step < 0 else m[-1])
        while True:
            j = k + step
            if wrap:
                j %= n
            elif not 0 <= j < n:
                break
            # brk[i] separates positions i and i + 1
            if brk[min(k, j) if abs(j - k) == 1 else max(k, j)] or j in used:
                break
            if abs(float((pts[j] - c) @ nrm)) > tol:
                break
            out.append(j)
            used.add(j)
            k = j
    if not head and not tail:
        return m
    return np.concatenate([np.array(head[::-1], dtype=np.int64), m,
                           np.array(tail, dtype=np.int64)])


def _members_to_line(pts, m, weight):
    c, d, _, _ = tls_fit(pts[m])
    proj = (pts[m] - c) @ d
    lo, hi = float(proj.min()), float(proj.max())
    anchor = c + 0.5 * (lo + hi) * d
    return LineFeature(anchor, d, 0.5 * (hi - lo), len(m), weight)


def _same_line(a: LineFeature, b: LineFeature, cfg: FrontendConfig) -> bool:
    if line_angle(a.direction, b.direction) >= math.radians(cfg.merge_angle_deg):
        return False
    off = max(abs(float((b.anchor - a.anchor) @ a.normal)),
              abs(float((a.anchor - b.anchor) @ b.normal)))
    return off < cfg.merge_offset


def extract_long_lines(scan: Scan, sensor: SensorModel, sectors: int = None,
                       cfg: FrontendConfig = FrontendConfig()) -> list:
    sectors = cfg.sectors if sectors is None else sectors
    if sectors < 4:
        raise ValueError("need at least 4 sectors")
    if sectors != cfg.sectors:
        cfg = FrontendConfig(**{**cfg.__dict__, "sectors": sectors})
    fits, pts = sector_fits(scan, sensor, cfg)
    if not fits:
        return []
    wrap = sensor.full_circle
    chains = [[fits[0]]]
    for f in fits[1:]:
        if _mergeable(chains[-1][-1], f, cfg, sectors, wrap):
            chains[-1].append(f)
        else:
            chains.append([f])
    if wrap and len(chains) > 1 and _mergeable(chains[-1][-1], chains[0][0], cfg, sectors, wrap):
        chains[0] = chains.pop() + chains[0]
    _, _, ranges = _valid_sequence(scan, sensor)
    brk = _breaks(ranges, wrap, cfg.gap_threshold)
    groups = []
    for ch in chains:
        m = _grow(pts, _trim(pts, np.concatenate([f.inliers for f in ch])), brk, wrap)
        groups.append([m, _members_to_line(pts, m, cfg.observed_weight)])
    # chains that grew over each other describe the same wall
    merged = True
    while merged:
        merged = False
        for a in range(len(groups)):
            for b in range(a + 1, len(groups)):
                ma, mb = groups[a][0], groups[b][0]
                shared = np.intersect1d(ma, mb).size
                if not shared:
                    continue
                if shared >= 0.5 * min(len(ma), len(mb)):
                    # a fragment swallowed by a longer run carries no extra evidence
                    del groups[b if len(mb) <= len(ma) else a]
                elif _same_line(groups[a][1], groups[b][1], cfg):
                    m = _grow(pts, _trim(pts, _union_in_order(ma, mb, len(pts), wrap)), brk, wrap)
                    groups[a] = [m, _members_to_line(pts, m, cfg.observed_weight)]
                    del groups[b]
                else:
                    continue
                merged = True
                break
            if merged:
                break
    return [g[1] for g in groups]


def _union_in_order(a, b, n: int, wrap: bool):
    """Union of two member sets in scan order (starting after the widest gap when wrapping)."""
    u = np.union1d(a, b).astype(np.int64)
    if wrap and len(u) > 1:
        gaps = np.diff(np.concatenate([u, [u[0] + n]]))
        u = np.roll(u, -(int(np.argmax(gaps)) + 1))
    return u


def infer_structural_hypotheses(lines: Sequence[LineFeature],
                                cfg: FrontendConfig = FrontendConfig()) -> list:
    out = []
    stable = [ln for ln in lines if ln.support_count >= cfg.stable_support]
    lo = math.radians(cfg.junction_min_deg)
    # (a) soft junctions between stable, clearly non-parallel lines
    for i in range(len(stable)):
        for j in range(i + 1, len(stable)):
            a, b = stable[i], stable[j]
            if line_angle(a.direction, b.direction) < lo:
                continue
            st = _intersect(a.anchor, a.direction, b.anchor, b.direction)
            if st is None:
                continue
            s, u = st
            if abs(s) <= a.half_length + cfg.extension_limit and \
                    abs(u) <= b.half_length + cfg.extension_limit:
                p = a.anchor + s * a.direction
                out.append(HypothesisFeature(PointFeature(p, cfg.inferred_weight),
                                             INFERRED_CORNER, cfg.inferred_weight))
    # (b) endpoints stay within observed support: lines come from inlier extents,
    # nothing is extended here.
    # (c) Manhattan completion for a single dominant direction
    if cfg.manhattan and len(lines) >= 2:
        par = math.radians(cfg.parallel_deg)
        if all(line_angle(a.direction, b.direction) < par
               for k, a in enumerate(lines) for b in lines[k + 1:]):
            ref = lines[0].direction
            acc = np.zeros(2)
            for ln in lines:
                d = ln.direction if ln.direction @ ref >= 0 else -ln.direction
                acc += max(ln.support_count, 1) * d
            d = acc / np.linalg.norm(acc)
            nrm = np.array([-d[1], d[0]])
            ends = np.array([e for ln in lines for e in ln.endpoints])
            proj = ends @ d
            far = float(proj[np.argmax(np.abs(proj))])
            lat = np.array([ln.anchor @ nrm for ln in lines])
            lat_lo, lat_hi = float(lat.min()), float(lat.max())
            anchor = far * d + 0.5 * (lat_lo + lat_hi) * nrm
            base = LineFeature(anchor, nrm, 0.5 * (lat_hi - lat_lo), 0, cfg.inferred_weight)
            out.append(HypothesisFeature(base, INFERRED_ORTHOGONAL, cfg.inferred_weight))
    return out


def _angle_key(node):
    p = node.representative
    return math.atan2(p[1], p[0])


def fuse_and_filter(points: Sequence[PointFeature], lines: Sequence[LineFeature],
                    hypotheses: Sequence[HypothesisFeature],
                    cfg: FrontendConfig = FrontendConfig()) -> list:
    kept_lines = [ln for ln in lines if ln.support_count >= cfg.min_points]
    corners = [h.base for h in hypotheses if h.kind == INFERRED_CORNER]
    extra_lines = [h.base for h in hypotheses if h.kind == INFERRED_ORTHOGONAL]
    ext = cfg.extension_limit
    segs = [(ln.anchor - (ln.half_length + ext) * ln.direction,
             ln.anchor + (ln.half_length + ext) * ln.direction) for ln in kept_lines]
    kept_pts = []
    for p in points:
        near_line = any(point_segment_distance(p.position, a, b) < cfg.support_distance
                        for a, b in segs)
        near_corner = any(np.linalg.norm(p.position - c.position) < cfg.support_distance
                          for c in corners)
        if near_line or near_corner:
            kept_pts.append(PointFeature(p.position, cfg.observed_weight))
    # an observed point confirming an inferred corner moves onto the line intersection
    # (far more precise than the curvature peak) and the hypothesis is absorbed; the
    # confirming point is retained either way, so fusion stays monotone
    free = []
    for c in corners:
        hit = [k for k, p in enumerate(kept_pts)
               if np.linalg.norm(p.position - c.position) < cfg.support_distance]
        if hit:
            for k in hit:
                kept_pts[k] = PointFeature(c.position, cfg.observed_weight)
        else:
            free.append(c)
    pts = sorted(kept_pts + free, key=_angle_key)
    lns = sorted(kept_lines + extra_lines, key=_angle_key)
    return pts + lns


def build_observation_graph(features: Sequence, k: int = 4) -> FeatureGraph:
    return build_knn_graph(features, k)


def register(scan: Scan, sensor: SensorModel, cfg: FrontendConfig = FrontendConfig()) -> FeatureGraph:
    """Full structural registration of one scan into its observation graph."""
    points = extract_short_features(scan, sensor, cfg)
    lines = extract_long_lines(scan, sensor, cfg.sectors, cfg)
    hyps = infer_structural_hypotheses(lines, cfg)
    return build_observation_graph(fuse_and_filter(points, lines, hyps, cfg), cfg.knn_k)
