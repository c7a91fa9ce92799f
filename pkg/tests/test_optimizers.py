from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drrlab.graphs import Graph, build_graph, metropolis_weights
from drrlab.metrics import consensus_sq, reference_solve
from drrlab.objectives import QuadraticProblem, make_quadratic
from drrlab.optimizers import (
    AgentStateBlock,
    ConstantStep,
    DivergenceError,
    HyperbolicStep,
    InverseTimeStep,
    PermutationStream,
    SampleStream,
    check_admissible,
    crr_epoch,
    drr_epoch,
    drr_inner_step,
    dsgd_epoch,
    epoch_gossip_rr_epoch,
    iterate,
    limit_points,
    min_K,
    stepsize_terms,
)


def _w(kind, n, **kw):
    return metropolis_weights(build_graph(kind, n, **kw))


def _identical_components(n, m, p, seed=0):
    base = make_quadratic(n, 1, p, seed=seed)
    Q = np.repeat(base.Q, m, axis=1)
    b = np.repeat(base.b, m, axis=1)
    return QuadraticProblem(Q, b)


def _trajectory(method, prob, w, x0, sched, epochs, seed):
    return np.stack([s.x for s in iterate(method, prob, w, x0, sched, epochs, seed)])


# ---------------------------------------------------------------------------
# inner steps and epochs


def test_single_agent_inner_step_is_plain_rr_step():
    prob = make_quadratic(1, 3, 2, seed=0)
    w = _w("ring", 1)
    x = np.array([[0.4, -1.0]])
    perms = PermutationStream(5, 3)
    out = drr_inner_step(AgentStateBlock(x=x), w, prob, perms, 0.1)
    comp = perms.perm(0, 0)[0]
    np.testing.assert_array_equal(out.x[0], x[0] - 0.1 * prob.component_gradient(0, comp, x[0]))
    assert out.inner == 1


def test_zero_gradients_reduce_to_gossip():
    n, p = 4, 2
    Q = np.broadcast_to(np.eye(p), (n, 2, p, p)).copy()
    x = np.random.default_rng(0).standard_normal((n, p))
    b = np.repeat(x[:, None, :], 2, axis=1)
    prob = QuadraticProblem(Q, b)  # every agent already sits at its own minimiser
    w = _w("ring", n)
    out = drr_inner_step(AgentStateBlock(x=x), w, prob, PermutationStream(0, 2), 0.3)
    np.testing.assert_allclose(out.x, w.w @ x, atol=1e-15)


def test_two_agent_hand_oracle():
    Q = np.array([[[[2.0]]], [[[4.0]]]])
    b = np.array([[[1.0]], [[-2.0]]])
    prob = QuadraticProblem(Q, b)
    w = metropolis_weights(Graph.from_pairs(2, [(0, 1)]))
    x = np.array([[1.0], [3.0]])
    alpha = 0.1
    # half-steps: 1 - 0.1 (2 - 1) = 0.9 and 3 - 0.1 (12 + 2) = 1.6, then average
    expected = np.array([[1.25], [1.25]])
    out = drr_inner_step(AgentStateBlock(x=x), w, prob, PermutationStream(0, 1), alpha)
    np.testing.assert_allclose(out.x, expected, atol=1e-14)


def test_inner_step_past_epoch_end_rejected():
    prob = make_quadratic(2, 2, 1)
    state = AgentStateBlock(x=np.zeros((2, 1)), inner=2)
    with pytest.raises(ValueError):
        drr_inner_step(state, _w("ring", 2), prob, PermutationStream(0, 2), 0.1)


def test_epoch_with_single_component_is_single_step():
    prob = make_quadratic(3, 1, 2, seed=1)
    w = _w("ring", 3)
    x = np.random.default_rng(0).standard_normal((3, 2))
    perms = PermutationStream(0, 1)
    a = drr_epoch(AgentStateBlock(x=x), w, prob, perms, ConstantStep(0.2))
    b = drr_inner_step(AgentStateBlock(x=x), w, prob, perms, 0.2)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.epoch == 1 and a.inner == 0 and a.grad_evals == 3


def test_epoch_must_start_at_zero():
    prob = make_quadratic(2, 2, 1)
    state = AgentStateBlock(x=np.zeros((2, 1)), inner=1)
    for fn in (drr_epoch, epoch_gossip_rr_epoch):
        with pytest.raises(ValueError):
            fn(state, _w("ring", 2), prob, PermutationStream(0, 2), ConstantStep(0.1))
    with pytest.raises(ValueError):
        dsgd_epoch(state, _w("ring", 2), prob, SampleStream(0, 2), ConstantStep(0.1))


def test_average_recursion_per_inner_step():
    prob = make_quadratic(6, 5, 3, seed=3)
    w = _w("ring", 6)
    x0 = np.random.default_rng(1).standard_normal((6, 3))
    worst = []

    def hook(l, xb, grads, xa):
        pred = xb.mean(axis=0) - 0.05 * grads.mean(axis=0)
        worst.append(np.max(np.abs(xa.mean(axis=0) - pred)))

    state = AgentStateBlock(x=x0)
    perms = PermutationStream(0, 5)
    for _ in range(20):
        state = drr_epoch(state, w, prob, perms, ConstantStep(0.05), on_step=hook)
    assert len(worst) == 100
    assert max(worst) <= 1e-12


# ---------------------------------------------------------------------------
# centralised


def test_crr_single_component_is_gradient_step():
    prob = make_quadratic(3, 1, 2, seed=2)
    x = np.array([0.5, -0.5])
    out = crr_epoch(x, prob, [0], 0.1)
    np.testing.assert_allclose(out, x - 0.1 * prob.full_gradient(x), atol=1e-15)


def test_crr_two_step_affine_map():
    Q = np.array([[np.diag([1.0, 2.0]), np.diag([3.0, 0.5])]])
    b = np.array([[[1.0, -1.0], [0.0, 2.0]]])
    prob = QuadraticProblem(Q, b)
    alpha = 0.2
    x = np.array([1.0, 1.0])
    # order (1, 0): y = x - a(Q1 x - b1), z = y - a(Q0 y - b0)
    y = x - alpha * (Q[0, 1] @ x - b[0, 1])
    z = y - alpha * (Q[0, 0] @ y - b[0, 0])
    np.testing.assert_allclose(crr_epoch(x, prob, [1, 0], alpha), z, atol=1e-14)


def test_crr_zero_stepsize_is_identity():
    prob = make_quadratic(2, 3, 2)
    x = np.array([0.3, 0.1])
    np.testing.assert_array_equal(crr_epoch(x, prob, [2, 0, 1], 0.0), x)


@pytest.mark.parametrize("pair", [("drr", "crr"), ("egrr", "crr"), ("dsgd", "sgd")])
def test_single_agent_reduction_is_bit_identical(pair):
    dist, cent = pair
    prob = make_quadratic(1, 8, 4, seed=9)
    w = _w("ring", 1)
    x0 = np.random.default_rng(0).standard_normal((1, 4))
    a = _trajectory(dist, prob, w, x0, ConstantStep(0.05), 30, 17)
    b = _trajectory(cent, prob, w, x0, ConstantStep(0.05), 30, 17)
    assert np.array_equal(a, b)


def test_dsgd_zero_variance_equals_distributed_gradient_descent():
    prob = _identical_components(4, 3, 2)
    w = _w("ring", 4)
    x0 = np.random.default_rng(2).standard_normal((4, 2))
    traj = _trajectory("dsgd", prob, w, x0, ConstantStep(0.1), 5, 0)
    x = x0.copy()
    for _ in range(5 * 3):
        g = np.stack([prob.component_gradient(i, 0, x[i]) for i in range(4)])
        x = w.w @ (x - 0.1 * g)
    np.testing.assert_allclose(traj[-1], x, atol=1e-13)


def test_dsgd_is_deterministic():
    prob = make_quadratic(4, 5, 3, seed=1)
    w = _w("ring", 4)
    x0 = np.zeros((4, 3))
    a = _trajectory("dsgd", prob, w, x0, ConstantStep(0.05), 10, 3)
    b = _trajectory("dsgd", prob, w, x0, ConstantStep(0.05), 10, 3)
    assert np.array_equal(a, b)


def test_egrr_exact_averaging_on_complete_graph():
    prob = make_quadratic(5, 4, 2, seed=0)
    w = _w("complete", 5)
    x0 = np.random.default_rng(0).standard_normal((5, 2))
    state = epoch_gossip_rr_epoch(AgentStateBlock(x=x0), w, prob, PermutationStream(0, 4), ConstantStep(0.1))
    assert consensus_sq(state.x) <= 1e-28


def test_egrr_consensus_error_tends_to_exceed_drr():
    w = _w("ring", 6)
    worse = 0
    for trial in range(50):
        prob = make_quadratic(6, 4, 3, seed=trial)
        x0 = np.random.default_rng(trial).standard_normal((6, 3))
        perms = PermutationStream(trial, 4)
        sched = ConstantStep(0.05)
        a = drr_epoch(AgentStateBlock(x=x0), w, prob, perms, sched)
        b = epoch_gossip_rr_epoch(AgentStateBlock(x=x0), w, prob, perms, sched)
        worse += consensus_sq(b.x) >= consensus_sq(a.x)
    assert worse >= 40


@pytest.mark.parametrize("method", ["drr", "crr", "dsgd", "sgd", "egrr"])
def test_budget_parity(method):
    prob = make_quadratic(3, 4, 2)
    states = list(iterate(method, prob, _w("ring", 3), np.zeros((3, 2)), ConstantStep(0.1), 3, 0))
    assert [s.grad_evals for s in states] == [0, 12, 24, 36]
    assert [s.epoch for s in states] == [0, 1, 2, 3]


def test_divergence_reported_with_epoch():
    prob = make_quadratic(2, 2, 2, mu=1.0, L=4.0)
    with pytest.raises(DivergenceError) as info:
        list(iterate("drr", prob, _w("ring", 2), np.ones((2, 2)), ConstantStep(10.0), 200, 0))
    assert info.value.method == "drr"
    assert "epoch" in str(info.value)


def test_iterate_rejects_bad_inputs():
    prob = make_quadratic(2, 2, 2)
    with pytest.raises(ValueError, match="unknown method"):
        list(iterate("adam", prob, _w("ring", 2), np.zeros((2, 2)), ConstantStep(0.1), 1, 0))
    with pytest.raises(ValueError, match="initial block"):
        list(iterate("drr", prob, _w("ring", 2), np.zeros((3, 2)), ConstantStep(0.1), 1, 0))


# ---------------------------------------------------------------------------
# randomness


def test_permutations_keyed_on_agent_and_epoch():
    s = PermutationStream(1, 6)
    a = s.perm(2, 5)
    _ = [s.perm(i, t) for i in range(4) for t in range(4)]
    assert np.array_equal(a, PermutationStream(1, 6).perm(2, 5))
    assert sorted(a.tolist()) == list(range(6))


def test_permutation_uniformity():
    s = PermutationStream(0, 3)
    counts = Counter(tuple(s.perm(0, t)) for t in range(120_000))
    assert len(counts) == 6
    for c in counts.values():
        assert abs(c / 120_000 - 1 / 6) <= 0.01


def test_sample_stream_range():
    d = SampleStream(0, 5).profile(3, 4)
    assert d.shape == (4, 5) and d.min() >= 0 and d.max() < 5


# ---------------------------------------------------------------------------
# limit points


def test_limit_points_zero_stepsize():
    prob = make_quadratic(3, 4, 2, seed=0)
    xs = reference_solve(prob).x_star
    prof = np.stack([np.random.default_rng(i).permutation(4) for i in range(3)])
    pts = limit_points(prob, xs, prof, 0.0)
    assert np.array_equal(pts, np.broadcast_to(xs, pts.shape))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.floats(1e-4, 0.5), st.integers(0, 1000))
def test_limit_points_telescope_back(n, m, alpha, seed):
    prob = make_quadratic(n, m, 3, seed=seed)
    xs = reference_solve(prob).x_star
    rng = np.random.default_rng(seed)
    prof = np.stack([rng.permutation(m) for _ in range(n)])
    pts = limit_points(prob, xs, prof, alpha)
    assert pts.shape == (m + 1, 3)
    np.testing.assert_allclose(pts[0], xs, atol=1e-12)
    np.testing.assert_allclose(pts[-1], xs, atol=1e-10)


def test_limit_points_hand_value():
    Q = np.array([[np.eye(2), np.eye(2)]])
    b = np.array([[[1.0, 0.0], [3.0, 2.0]]])
    prob = QuadraticProblem(Q, b)
    xs = np.array([2.0, 1.0])
    pts = limit_points(prob, xs, np.array([[1, 0]]), 0.5)
    # grad of component 1 at x* is x* - (3, 2) = (-1, -1)
    np.testing.assert_allclose(pts[1], [2.5, 1.5])
    np.testing.assert_allclose(pts[2], xs)


# ---------------------------------------------------------------------------
# stepsizes


def test_inverse_time_schedule_positive_decreasing():
    s = InverseTimeStep(16.0, 100.0, 8, 0.5)
    vals = [s(t) for t in range(50)]
    assert all(v > 0 for v in vals)
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert s(0) == pytest.approx(16 / (8 * 0.5 * 100))


def test_hyperbolic_schedule():
    s = HyperbolicStep(50.0, 400.0)
    assert s(0) == 1 / 400 and s(2) == 1 / 500


def test_admissibility_complete_graph_convention():
    terms = stepsize_terms(0.0, 2.0, 0.5)
    assert terms["consensus"] == math.inf
    rep = check_admissible(ConstantStep(1e-3), 0.0, 2.0, 0.5, 4)
    assert rep.binding in ("contraction", "coupling")
    assert rep.threshold == pytest.approx(min(1 / (2 * 0.5), 0.5 / (8 * math.sqrt(30) * 4)))
    assert any("rho_w = 0" in msg for msg in rep.warnings)


def test_admissibility_threshold_by_substitution():
    r = 1 / 3
    r2 = r * r
    consensus = math.sqrt((2 - r2) / (24 * r2 * (5 - r2))) * (1 - r2)
    contraction = (1 - r2) / 2
    coupling = (1 - r2) / (8 * math.sqrt(30))
    rep = check_admissible(ConstantStep(1.0), r, 1.0, 1.0, 4)
    assert rep.threshold == pytest.approx(min(consensus, contraction, coupling), rel=1e-14)
    assert rep.binding == "coupling"
    assert not rep.admissible
    assert check_admissible(ConstantStep(rep.threshold * 0.99), r, 1.0, 1.0, 4).admissible


def test_theta_gate():
    ok = check_admissible(InverseTimeStep(13.0, 1e6, 4, 1.0), 0.5, 1.0, 1.0, 4)
    assert not any("theta" in msg for msg in ok.warnings)
    bad = check_admissible(InverseTimeStep(10.0, 1e6, 4, 1.0), 0.5, 1.0, 1.0, 4)
    assert any("theta > 12" in msg for msg in bad.warnings)


def test_min_K_makes_schedule_admissible():
    rho, L, mu, m, theta = 0.8, 2.0, 0.5, 8, 16.0
    K = min_K(theta, rho, L, mu, m)
    rep = check_admissible(InverseTimeStep(theta, K, m, mu), rho, L, mu, m)
    assert rep.admissible
    assert rep.alpha_max == pytest.approx(rep.threshold, rel=1e-9)
    short = check_admissible(InverseTimeStep(theta, K / 2, m, mu), rho, L, mu, m)
    assert not short.admissible and any("below required" in msg for msg in short.warnings)
