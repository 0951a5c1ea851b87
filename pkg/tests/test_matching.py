from __future__ import annotations

import math

import numpy as np
import pytest

from graphloc.geometry import FeatureGraph, LineFeature, PointFeature, Pose2, build_knn_graph
from graphloc.matching import (CandidateSet, MatchConfig, build_candidates, context_matrix,
                               format_plan, greedy_association, marginal_masses, pair_cost,
                               plan_objective, relational_penalty, solve_uot)

from oracles import dense_uot_sinkhorn, single_pair_gamma, uot_objective

CFG = MatchConfig()


def graph(nodes, edges=()):
    return FeatureGraph(tuple(nodes), tuple(edges), 1)


# ---------------------------------------------------------------- pair costs

def test_point_point_costs():
    assert pair_cost(PointFeature((1, 1)), PointFeature((1, 1)), Pose2(), CFG) == 0.0
    assert pair_cost(PointFeature((0, 0)), PointFeature((3, 4)), Pose2(), CFG) == pytest.approx(5.0)


def test_orthogonal_lines_cost():
    cfg = MatchConfig(w_theta=1, w_perp=0, w_par=0)
    c = pair_cost(LineFeature((0, 0), (1, 0), 1), LineFeature((0, 0), (0, 1), 1), Pose2(), cfg)
    assert c == pytest.approx((math.pi / 2) ** 2)
    assert c == pytest.approx(2.4674, abs=1e-4)


def test_parallel_lines_cross_track_cost():
    cfg = MatchConfig(w_theta=0, w_perp=1, w_par=0)
    c = pair_cost(LineFeature((0, 2), (1, 0), 1), LineFeature((0, 0), (1, 0), 1), Pose2(), cfg)
    assert c == pytest.approx(2.0)
    cfg = MatchConfig(w_theta=0, w_perp=0, w_par=1)
    c = pair_cost(LineFeature((3, 0), (1, 0), 1), LineFeature((0, 0), (1, 0), 5), Pose2(), cfg)
    assert c == pytest.approx(3.0)


def test_point_to_segment_cost():
    c = pair_cost(PointFeature((0, 1)), LineFeature((0, 0), (1, 0), 5), Pose2(), CFG)
    assert c == pytest.approx(1.0)
    # beyond the segment end the distance is to the endpoint
    c = pair_cost(PointFeature((8, 4)), LineFeature((0, 0), (1, 0), 5), Pose2(), CFG)
    assert c == pytest.approx(5.0)


def test_line_to_point_disallowed():
    assert pair_cost(LineFeature((0, 0), (1, 0), 1), PointFeature((0, 0)), Pose2(), CFG) is None


def test_cost_uses_pose():
    p = Pose2(1, 0, math.pi / 2)
    assert pair_cost(PointFeature((1, 0)), PointFeature((1, 1)), p, CFG) == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------- candidates

def test_candidate_gating():
    s = graph([PointFeature((0, 0))])
    assert len(build_candidates(s, graph([PointFeature((0.5, 0))]), Pose2(), MatchConfig(gate_radius=2))) == 1
    assert len(build_candidates(s, graph([PointFeature((5, 0))]), Pose2(), MatchConfig(gate_radius=2))) == 0


def test_candidate_top_k_against_sort():
    rng = np.random.default_rng(0)
    tgt = [PointFeature(p) for p in rng.uniform(-1, 1, (10, 2))]
    s = graph([PointFeature((0, 0))])
    cand = build_candidates(s, graph(tgt), Pose2(), MatchConfig(top_k=3, gate_radius=5))
    d = [np.linalg.norm(t.position) for t in tgt]
    assert list(cand.cols) == list(np.argsort(d)[:3])


def test_candidate_ties_lower_index():
    s = graph([PointFeature((0, 0))])
    t = graph([PointFeature((1, 0)), PointFeature((-1, 0)), PointFeature((0, 1))])
    cand = build_candidates(s, t, Pose2(), MatchConfig(top_k=2))
    assert list(cand.cols) == [0, 1]


def test_unmatched_sources_recorded():
    s = graph([PointFeature((0, 0)), PointFeature((50, 0))])
    cand = build_candidates(s, graph([PointFeature((0.2, 0))]), Pose2(), CFG)
    assert list(cand.unmatched_sources) == [1]


def test_candidate_set_validation():
    with pytest.raises(ValueError):
        CandidateSet.from_arrays([0], [0], [np.inf], 1, 1)
    with pytest.raises(ValueError):
        CandidateSet.from_arrays([0, 0], [0, 0], [1.0, 2.0], 1, 1)


# ---------------------------------------------------------------- relational penalty

def test_relational_penalty_points():
    s = [PointFeature((0, 0)), PointFeature((3, 0))]
    t_same = [PointFeature((1, 1)), PointFeature((1, 4))]
    t_far = [PointFeature((0, 0)), PointFeature((4, 0))]
    assert relational_penalty(((0, 1), (0, 1)), s, t_same) == pytest.approx(0.0)
    assert relational_penalty(((0, 1), (0, 1)), s, t_far) == pytest.approx(1.0)


def test_relational_penalty_lines_and_mixed():
    s = [LineFeature((0, 0), (1, 0), 1), LineFeature((0, 1), (1, 0), 1)]
    t = [LineFeature((0, 0), (1, 0), 1), LineFeature((0, 0), (0, 1), 1)]
    assert relational_penalty(((0, 1), (0, 1)), s, t) == pytest.approx((math.pi / 2) ** 2)
    mixed = [PointFeature((0, 0)), LineFeature((0, 1), (1, 0), 1)]
    assert relational_penalty(((0, 1), (0, 1)), mixed, t) == 0.0


def test_context_matrix_matches_penalty():
    s = build_knn_graph([PointFeature((0, 0)), PointFeature((3, 0))], 1)
    t = graph([PointFeature((0, 0)), PointFeature((3, 0)), PointFeature((4, 0))])
    cand = build_candidates(s, t, Pose2(), MatchConfig(gate_radius=10))
    Q = context_matrix(cand, s, t).toarray()
    assert np.allclose(Q, Q.T)
    for p, (i, j, _) in enumerate(cand.pairs):
        for q, (i2, j2, _) in enumerate(cand.pairs):
            if {i, i2} == {0, 1}:
                ref = relational_penalty(((i, i2), (j, j2)), s.nodes, t.nodes)
                assert Q[p, q] == pytest.approx(ref)
            else:
                assert Q[p, q] == 0.0


# ---------------------------------------------------------------- solver

def single_pair(c):
    cand = CandidateSet.from_arrays([0], [0], [c], 1, 1)
    g = graph([PointFeature((0, 0))])
    return solve_uot(cand, g, g, MatchConfig(beta=0.0, total_mass=1.0, sinkhorn_tol=1e-14,
                                             sinkhorn_max_iters=10000))


def test_single_pair_zero_cost():
    plan = single_pair(0.0)
    assert plan.gamma[0] == pytest.approx(1.0, abs=1e-6)
    assert plan.gamma[0] == pytest.approx(single_pair_gamma(0.0, 1.0, 0.05), abs=1e-6)


def test_single_pair_cost_gives_inverse_e():
    c = 2 * 1.0 + 0.05
    plan = single_pair(c)
    assert plan.gamma[0] == pytest.approx(math.exp(-1), abs=1e-6)
    assert plan.gamma[0] == pytest.approx(single_pair_gamma(c, 1.0, 0.05), abs=1e-6)


def test_diagonal_concentration():
    C = np.array([[0.0, 10.0], [10.0, 0.0]])
    cand = CandidateSet.dense(C)
    g = graph([PointFeature((0, 0)), PointFeature((1, 0))])
    plan = solve_uot(cand, g, g, MatchConfig(beta=0, total_mass=1.0, epsilon=0.01))
    G = np.zeros((2, 2))
    for i, j, v in plan.entries:
        G[i, j] = v
    assert min(G[0, 0], G[1, 1]) >= 10 * max(G[0, 1], G[1, 0])


def test_context_prefers_spacing_consistent_cluster():
    src = build_knn_graph([PointFeature((0, 0)), PointFeature((3, 0))], 1)
    # cluster A keeps the 3 m spacing, cluster B sits at 2 m spacing; both equally near
    tgt = graph([PointFeature((0, 0.3)), PointFeature((3, 0.3)),
                 PointFeature((0, -0.3)), PointFeature((2, -0.3))])
    C = np.array([[0.3, np.inf, 0.3, np.inf], [np.inf, 0.3, np.inf, 0.3]])
    cand = CandidateSet.dense(C)
    plan = solve_uot(cand, src, tgt, MatchConfig(beta=5.0, total_mass=2.0))
    G = {(i, j): v for i, j, v in plan.entries}
    assert G[(0, 0)] + G[(1, 1)] > G[(0, 2)] + G[(1, 3)]
    base = solve_uot(cand, src, tgt, MatchConfig(beta=0.0, total_mass=2.0))
    Gb = {(i, j): v for i, j, v in base.entries}
    assert Gb[(1, 1)] == pytest.approx(Gb[(1, 3)])


def test_zero_plan_objective():
    n = 3
    cand = CandidateSet.dense(np.ones((n, n)))
    cfg = MatchConfig(beta=0)
    mu, nu = marginal_masses(n, n, cfg)
    assert plan_objective(np.zeros(n * n), cand, mu, nu, cfg) == pytest.approx(2 * cfg.rho * n)


def random_instance(rng, ns, nt, density=0.7):
    C = rng.uniform(0, 2, (ns, nt))
    C[rng.random((ns, nt)) > density] = np.inf
    C[np.arange(ns), rng.integers(0, nt, ns)] = rng.uniform(0, 2, ns)
    return C


def test_solver_matches_dense_oracle_objective():
    rng = np.random.default_rng(11)
    cfg = MatchConfig(beta=0.0)
    for _ in range(30):
        ns, nt = rng.integers(1, 5, 2)
        C = random_instance(rng, ns, nt)
        cand = CandidateSet.dense(C)
        g_s = graph([PointFeature((0, 0))] * ns)
        plan = solve_uot(cand, g_s, graph([PointFeature((0, 0))] * nt), cfg)
        mu, nu = marginal_masses(ns, nt, cfg)
        ref = dense_uot_sinkhorn(C, mu, nu, cfg.rho, cfg.epsilon)
        obj = plan_objective(plan.gamma, cand, mu, nu, cfg)
        assert abs(obj - uot_objective(ref, C, mu, nu, cfg.rho, cfg.epsilon)) <= 1e-6 * max(1, abs(obj))


def test_outer_loop_never_worse_than_initial_plan():
    rng = np.random.default_rng(12)
    for _ in range(50):
        pos_s = rng.uniform(-3, 3, (5, 2))
        nodes_s = [PointFeature(p) for p in pos_s]
        src = build_knn_graph(nodes_s, 2)
        tgt = graph([PointFeature(p) for p in pos_s + rng.normal(0, 0.3, (5, 2))]
                    + [PointFeature(p) for p in rng.uniform(-3, 3, (3, 2))])
        cfg = MatchConfig(beta=1.0)
        cand = build_candidates(src, tgt, Pose2(), cfg)
        plan = solve_uot(cand, src, tgt, cfg)
        mu, nu = marginal_masses(cand.n_src, cand.n_tgt, cfg)
        Q = context_matrix(cand, src, tgt)
        init = solve_uot(cand, src, tgt, MatchConfig(beta=0.0))
        assert plan.objective <= plan_objective(init.gamma, cand, mu, nu, cfg, Q) + 1e-12
        assert plan.objective == pytest.approx(plan_objective(plan.gamma, cand, mu, nu, cfg, Q))


def test_empty_candidates_give_flagged_plan():
    cand = CandidateSet.dense(np.full((2, 2), np.inf))
    plan = solve_uot(cand, graph([PointFeature((0, 0))] * 2), graph([PointFeature((0, 0))] * 2))
    assert plan.empty and plan.mass == 0.0


def test_log_domain_handles_large_costs():
    C = np.array([[80.0, 90.0], [95.0, 85.0]])
    cand = CandidateSet.dense(C)
    g = graph([PointFeature((0, 0))] * 2)
    plan = solve_uot(cand, g, g, MatchConfig(beta=0, epsilon=0.01))
    assert np.all(np.isfinite(plan.gamma)) and np.all(plan.gamma >= 0)


def test_source_weights_scale_mass():
    mu, nu = marginal_masses(2, 4, CFG, [1.0, 0.3])
    assert np.allclose(mu, [1.0, 0.3]) and np.allclose(nu, 0.5)


def test_greedy_takes_cheapest():
    C = np.array([[0.5, 0.1, 0.9], [0.2, 0.3, np.inf]])
    cand = CandidateSet.dense(C)
    plan = greedy_association(cand, graph([PointFeature((0, 0))] * 2), graph([PointFeature((0, 0))] * 3))
    picked = {(i, j) for i, j, v in plan.entries if v > 0}
    assert picked == {(0, 1), (1, 0)}


def test_format_plan_lines():
    cand = CandidateSet.dense(np.array([[0.0]]))
    plan = single_pair(0.0)
    line = format_plan(plan).strip().split()
    assert line[:2] == ["0", "0"] and float(line[2]) == pytest.approx(1.0, abs=1e-6)
