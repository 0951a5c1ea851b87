from __future__ import annotations

import math

import numpy as np
import pytest

from graphloc.frontend import (INFERRED_CORNER, INFERRED_ORTHOGONAL, FrontendConfig,
                               HypothesisFeature, extract_long_lines, extract_short_features,
                               fuse_and_filter, infer_structural_hypotheses, register,
                               sector_fits, tls_fit)
from graphloc.geometry import LineFeature, PointFeature, Pose2, line_angle
from graphloc.prior_map import PriorMap, SensorModel
from graphloc.scan_sim import Scan, Scenario, simulate_scan

from oracles import line_intersection

SENSOR = SensorModel(720, 2 * math.pi, 30, 0.1)


def scan_of(polys, closed, pose=Pose2(), noise=0.0, seed=0, sensor=SENSOR):
    sc = Scenario(PriorMap(polys, closed), sensor, [0.0], [pose], [], noise, seed)
    return simulate_scan(sc, 0)


def test_tls_fit_on_exact_line():
    pts = np.column_stack([np.linspace(0, 4, 9), 1 + 0.5 * np.linspace(0, 4, 9)])
    c, d, n, rms = tls_fit(pts)
    assert rms < 1e-12
    ref = np.array([2, 1]) / math.sqrt(5)
    assert abs(d[0] * ref[1] - d[1] * ref[0]) < 1e-12
    assert abs(n @ d) < 1e-12


def test_straight_wall_has_no_edge_points():
    s = scan_of([[(-5, 2), (5, 2)]], [False])
    assert extract_short_features(s, SENSOR) == []


def test_corner_yields_one_edge_point():
    s = scan_of([[(4, -3), (4, 3), (-3, 3)]], [False])
    pts = extract_short_features(s, SENSOR)
    assert len(pts) == 1
    assert np.linalg.norm(pts[0].position - [4, 3]) < 0.05


def test_short_features_deterministic():
    s = scan_of([[(4, -3), (4, 3), (-3, 3)]], [False], noise=0.01, seed=2)
    a = extract_short_features(s, SENSOR)
    b = extract_short_features(s, SENSOR)
    assert a == b


def test_single_wall_line():
    s = scan_of([[(-5, 2), (5, 2)]], [False])
    lines = extract_long_lines(s, SENSOR)
    assert len(lines) == 1
    ln = lines[0]
    assert line_angle(ln.direction, (1, 0)) < 1e-3
    # spacing of the last samples at the wall ends
    r_end = math.hypot(5, 2)
    assert abs(ln.half_length - 5.0) <= 2 * SENSOR.angular_step * r_end
    assert abs(ln.anchor[1] - 2.0) < 1e-9


def test_two_perpendicular_walls():
    s = scan_of([[(4, -3), (4, 3), (-3, 3)]], [False])
    lines = extract_long_lines(s, SENSOR)
    assert len(lines) == 2
    assert abs(line_angle(lines[0].direction, lines[1].direction) - math.pi / 2) < 1e-2


def test_all_invalid_scan():
    s = Scan(0.0, np.full(720, np.nan), np.zeros(720, bool))
    assert extract_long_lines(s, SENSOR) == []
    assert extract_short_features(s, SENSOR) == []
    assert len(register(s, SENSOR)) == 0


def test_sector_count_validated():
    s = scan_of([[(-5, 2), (5, 2)]], [False])
    with pytest.raises(ValueError):
        extract_long_lines(s, SENSOR, sectors=3)


def test_sector_fits_have_nonempty_spans():
    s = scan_of([[(-4, -3), (6, -3), (6, 7), (-4, 7)]], [True], noise=0.01)
    fits, _ = sector_fits(s, SENSOR)
    assert fits
    for f in fits:
        assert f.inlier_ray_span[0] <= f.inlier_ray_span[1] and f.rms_residual >= 0


def test_lines_never_exceed_observed_extent():
    s = scan_of([[(-4, -3), (6, -3), (6, 7), (-4, 7)]], [True], Pose2(0.3, 0.2, 0.1),
                noise=0.01, seed=1)
    pts = s.points(SENSOR)[s.valid]
    for ln in extract_long_lines(s, SENSOR):
        # points within 5 cm of the line bound its support
        d = np.abs((pts - ln.anchor) @ ln.normal)
        proj = (pts[d < 0.05] - ln.anchor) @ ln.direction
        assert ln.half_length <= 0.5 * (proj.max() - proj.min()) + 0.1


def test_right_angle_junction_hypothesis():
    a = LineFeature.from_endpoints((0, 0), (4, 0), support_count=50)
    b = LineFeature.from_endpoints((4.5, 0.5), (4.5, 5), support_count=50)
    hyps = infer_structural_hypotheses([a, b])
    corners = [h for h in hyps if h.kind == INFERRED_CORNER]
    assert len(corners) == 1
    ref = line_intersection(a.anchor, a.direction, b.anchor, b.direction)
    assert np.allclose(corners[0].base.position, ref, atol=1e-12)
    assert corners[0].weight < 1.0


def test_junction_needs_stable_lines_and_extent():
    a = LineFeature.from_endpoints((0, 0), (4, 0), support_count=5)
    b = LineFeature.from_endpoints((4.5, 0.5), (4.5, 5), support_count=50)
    assert infer_structural_hypotheses([a, b]) == []
    far = LineFeature.from_endpoints((10, 3), (10, 8), support_count=50)
    a2 = LineFeature.from_endpoints((0, 0), (4, 0), support_count=50)
    assert infer_structural_hypotheses([a2, far]) == []


def test_parallel_lines_orthogonal_hypothesis():
    a = LineFeature.from_endpoints((0, -2), (8, -2), support_count=100)
    b = LineFeature.from_endpoints((0, 2), (7, 2), support_count=100)
    cfg = FrontendConfig(manhattan=True)
    hyps = infer_structural_hypotheses([a, b], cfg)
    assert len(hyps) == 1 and hyps[0].kind == INFERRED_ORTHOGONAL
    assert line_angle(hyps[0].base.direction, (0, 1)) < 1e-12
    assert hyps[0].base.weight == pytest.approx(cfg.inferred_weight)
    assert infer_structural_hypotheses([a, b]) == []


def test_empty_hypotheses():
    assert infer_structural_hypotheses([]) == []


def test_fusion_keeps_supported_corner():
    a = LineFeature.from_endpoints((0, 0), (4, 0), support_count=50)
    b = LineFeature.from_endpoints((4, 0), (4, 5), support_count=50)
    corner = PointFeature((4.02, 0.0))
    out = fuse_and_filter([corner], [a, b], [])
    assert any(isinstance(n, PointFeature) for n in out)


def test_fusion_drops_isolated_point():
    a = LineFeature.from_endpoints((0, 0), (4, 0), support_count=50)
    out = fuse_and_filter([PointFeature((2.0, 1.0))], [a], [])
    assert not any(isinstance(n, PointFeature) for n in out)


def test_fusion_drops_spurious_short_line():
    a = LineFeature.from_endpoints((0, 0), (0.2, 0), support_count=3)
    assert fuse_and_filter([], [a], [], FrontendConfig(min_points=8)) == []


def test_fusion_weights_and_order():
    a = LineFeature.from_endpoints((0, 0), (4, 0), support_count=50)
    b = LineFeature.from_endpoints((4.5, 0.5), (4.5, 5), support_count=50)
    hyps = infer_structural_hypotheses([a, b])
    out = fuse_and_filter([], [a, b], hyps)
    kinds = [isinstance(n, PointFeature) for n in out]
    assert kinds == sorted(kinds, reverse=True)  # points first
    assert out[0].weight == pytest.approx(0.3)
    assert all(n.weight == 1.0 for n in out if isinstance(n, LineFeature))


def test_room_observation_graph():
    s = scan_of([[(-4, -3), (6, -3), (6, 7), (-4, 7)]], [True], Pose2(0.3, 0.2, 0.1))
    g = register(s, SENSOR)
    assert sum(isinstance(n, LineFeature) for n in g.nodes) == 4
    assert sum(isinstance(n, PointFeature) for n in g.nodes) == 4
    deg = np.zeros(len(g))
    for i, j in g.edges:
        deg[i] += 1
        deg[j] += 1
    assert np.all(deg >= 1)


def test_limited_fov_scan():
    sensor = SensorModel(270, math.radians(270), 30, 0.1)
    s = scan_of([[(-4, -3), (6, -3), (6, 7), (-4, 7)]], [True], sensor=sensor)
    lines = extract_long_lines(s, sensor)
    assert len(lines) >= 3
