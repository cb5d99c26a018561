import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from progfd.allocator import (
    AllocationInfeasible,
    HealthPolicy,
    TeamSpec,
    assignment_from_alpha,
    build_allocation_qp,
    health_mask,
    health_weights,
    should_reallocate,
    solve_allocation,
)
from progfd.detector import HealthLabel
from progfd.qp import QpProblem
from progfd.simulator import run_scenario
from oracles import quadprog_solve

H, S, F, U = HealthLabel.HEALTHY, HealthLabel.SUSPECT, HealthLabel.FAULT, HealthLabel.UNINFORMATIVE


def random_instance(rng, N=None, M=None):
    N = int(rng.integers(1, 4)) if N is None else N
    M = int(rng.integers(1, 4)) if M is None else M
    Smat = (rng.uniform(size=(N, M)) < 0.7).astype(float)
    for m in range(M):
        if not Smat[:, m].any():
            Smat[rng.integers(N), m] = 1.0
    spec = TeamSpec(Smat, rng.uniform(0, 2, (N, M)), rng.uniform(1, 5, N), kappa=1.0, rho=1.0,
                    coverage_cost=10.0, u_max=0.05)
    pos = rng.uniform(0, 1, (N, 2))
    goals = rng.uniform(0, 1, (M, 2))
    return spec, pos, goals


def solve(spec, pos, goals, health, policy=None, prev=None, lam=0.0, warm=None, demand=None):
    policy = policy or HealthPolicy()
    w, c = health_weights(spec, policy, health)
    g = health_mask(spec, health)
    prob = build_allocation_qp(spec, pos, goals, w, c, g, prev, lam, demand=demand)
    return prob, solve_allocation(prob, warm)


def test_health_weights():
    spec = TeamSpec(np.ones((3, 2)), np.arange(6.0).reshape(3, 2), [2.0, 3.0, 4.0])
    pol = HealthPolicy(kappa_s=0.7, M_f=500.0, rho_s=0.5)
    w, c = health_weights(spec, pol, [H, H, H])
    np.testing.assert_array_equal(w, spec.base_weights)
    np.testing.assert_array_equal(c, spec.base_slack_cost)
    w, c = health_weights(spec, pol, [H, S, F])
    np.testing.assert_allclose(w[1], spec.base_weights[1] + 0.7)
    np.testing.assert_allclose(c[1], 3.0 * 1.5)
    np.testing.assert_allclose(w[2], spec.base_weights[2] + 500.0)
    assert c[2] == 4.0
    w_u, c_u = health_weights(spec, pol, [U, H, H])
    np.testing.assert_allclose(w_u[0], spec.base_weights[0] + 0.7)


def test_health_mask():
    spec = TeamSpec(np.ones((3, 2)), np.zeros((3, 2)), 1.0)
    np.testing.assert_array_equal(health_mask(spec, [H, H, H]), [1, 1, 1])
    np.testing.assert_array_equal(health_mask(spec, [H, F, S]), [1, 0, 1])
    np.testing.assert_array_equal(health_mask(spec, [U, S, S]), [1, 1, 1])


def test_policy_validation():
    with pytest.raises(ValueError, match="M_f"):
        HealthPolicy(kappa_s=2.0, M_f=1.0)
    with pytest.raises(ValueError, match="lambda"):
        HealthPolicy(lam=-1.0)
    with pytest.raises(ValueError, match="no capable robot"):
        TeamSpec([[1, 0]], [[0, 0]], 1.0)


def test_should_reallocate():
    pol = HealthPolicy(cooldown_steps=5, periodic_resolve_every=10)
    assert not should_reallocate(13, True, 10, pol)
    assert should_reallocate(20, False, 10, pol)
    assert not should_reallocate(19, False, 10, pol)
    assert should_reallocate(15, True, 10, pol)


def test_robot_at_goal_needs_no_motion():
    spec = TeamSpec([[1.0]], [[0.5]], 1.0)
    _, sol = solve(spec, [[0.4, 0.4]], [[0.4, 0.4]], [H])
    np.testing.assert_allclose(sol.u, 0.0, atol=1e-7)
    np.testing.assert_allclose(sol.delta, 0.0, atol=1e-7)
    assert sol.alpha[0, 0] == pytest.approx(1.0, abs=1e-6)


def test_zero_lambda_ignores_previous_alpha():
    rng = np.random.default_rng(3)
    spec, pos, goals = random_instance(rng, 3, 3)
    _, a = solve(spec, pos, goals, [H] * 3, prev=np.zeros((3, 3)), lam=0.0)
    _, b = solve(spec, pos, goals, [H] * 3, prev=rng.uniform(0, 0.3, (3, 3)), lam=0.0)
    np.testing.assert_allclose(a.alpha, b.alpha, atol=1e-6)


def _fixed_alpha_objective(spec, pos, goals, w, c, alpha):
    """Optimal cost over (u, delta, shortfall) with alpha substituted out, via the oracle."""
    prob = build_allocation_qp(spec, pos, goals, w, c, np.ones(spec.N))
    qp = prob.qp
    i_a = prob.slices()[1]
    a = alpha.ravel()
    keep = np.ones(qp.n, dtype=bool)
    keep[i_a] = False
    G = qp.G[:, keep]
    h = qp.h - qp.G[:, i_a] @ a
    rows = np.any(G != 0, axis=1)
    assert np.all(h[~rows] >= -1e-12)  # pinned alpha respects its own bounds
    A = qp.A[:, keep]
    b = qp.b - qp.A[:, i_a] @ a
    _, val = quadprog_solve(qp.P[np.ix_(keep, keep)], qp.q[keep], G[rows], h[rows], A, b)
    return val + qp.q[i_a] @ a


def test_diagonal_preference_matches_vertex_enumeration():
    spec = TeamSpec(np.ones((2, 2)), [[0.1, 1.5], [1.5, 0.1]], 3.0, kappa=1.0)
    pos = np.array([[0.2, 0.2], [0.8, 0.2]])
    goals = np.array([[0.25, 0.5], [0.75, 0.5]])
    w, c = health_weights(spec, HealthPolicy(), [H, H])
    _, sol = solve(spec, pos, goals, [H, H])
    best = None
    for rows in itertools.product([(0, 0), (1, 0), (0, 1)], repeat=2):
        alpha = np.array(rows, dtype=float)
        if np.any(alpha.sum(axis=0) > 1):
            continue  # over-covers a task: the coverage row cannot hold
        val = _fixed_alpha_objective(spec, pos, goals, w, c, alpha)
        if best is None or val < best[0]:
            best = (val, alpha)
    np.testing.assert_array_equal(best[1], np.eye(2))
    np.testing.assert_allclose(sol.alpha, np.eye(2), atol=1e-5)
    assert sol.objective == pytest.approx(best[0], abs=1e-6)


def test_warm_resolve_is_fixed_point():
    rng = np.random.default_rng(9)
    spec, pos, goals = random_instance(rng, 3, 3)
    _, first = solve(spec, pos, goals, [H, S, H])
    _, again = solve(spec, pos, goals, [H, S, H], prev=first.alpha, lam=0.5, warm=first)
    np.testing.assert_allclose(again.alpha, first.alpha, atol=1e-6)
    assert again.churn <= 1e-6


def test_fault_on_sole_specialist_leaves_task_unassigned():
    spec = TeamSpec([[1, 0], [0, 1], [0, 1]], np.full((3, 2), 0.5), 2.0)
    pos = np.array([[0.1, 0.1], [0.5, 0.1], [0.9, 0.1]])
    goals = np.array([[0.3, 0.6], [0.7, 0.6]])
    prob, sol = solve(spec, pos, goals, [F, H, H])
    assert np.all(sol.alpha[:, 0] <= 1e-6)
    assert sol.shortfall[0] == pytest.approx(1.0, abs=1e-6)
    assert sol.alpha[1:, 1].sum() == pytest.approx(1.0, abs=1e-6)
    qp = prob.qp
    assert np.max(qp.G @ sol.solver_stats.x - qp.h) <= 1e-6


def test_noise_scenario_reassignment(scenario):
    from progfd.metrics import summary_rows

    rows = summary_rows(run_scenario(scenario("noise")))
    assert rows[2]["fault_det_step"] is not None
    assert rows[1]["task_before"] == 0 and rows[1]["task_after"] == 2
    assert rows[3]["task_before"] is None and rows[3]["task_after"] == 0
    assert rows[2]["task_after"] is None


def test_assignment_extraction():
    alpha = np.array([[0.9, 0.0], [0.6, 0.3], [0.0, 0.4]])
    assert assignment_from_alpha(alpha) == [0, None, None]
    assert assignment_from_alpha(np.array([[0.7, 0.7]])) == [0]


def test_dimension_mismatch():
    spec = TeamSpec(np.ones((2, 2)), np.zeros((2, 2)), 1.0)
    with pytest.raises(ValueError):
        build_allocation_qp(spec, np.zeros((3, 2)), np.zeros((2, 2)), np.zeros((2, 2)), np.ones(2), np.ones(2))


health = st.lists(st.sampled_from([H, S, F, U]), min_size=3, max_size=3)


@given(st.integers(0, 10**6), health)
def test_feasible_and_masked_under_health_fuzzing(seed, labels):
    rng = np.random.default_rng(seed)
    spec, pos, goals = random_instance(rng, 3, int(rng.integers(1, 4)))
    prev = rng.uniform(0, 1, (3, spec.M)) / spec.M
    prob, sol = solve(spec, pos, goals, labels, prev=prev, lam=0.5)  # raises on infeasible
    assert np.linalg.eigvalsh(prob.qp.P).min() >= -1e-10
    assert np.all(sol.alpha.sum(axis=1) <= 1 + 1e-6)
    assert np.all(sol.alpha <= spec.S + 1e-6)
    assert np.all(sol.delta <= spec.delta_max + 1e-6)
    for i, lab in enumerate(labels):
        if lab == F:
            assert np.all(sol.alpha[i] <= 1e-6)


def test_churn_monotone_in_lambda():
    rng = np.random.default_rng(17)
    for _ in range(25):
        spec, pos, goals = random_instance(rng, 3, 3)
        prev = np.zeros((3, 3))
        for i in range(3):
            prev[i, rng.integers(3)] = rng.uniform(0.5, 1.0)
        labels = [rng.choice([H, S, F]) for _ in range(3)]
        churns = [solve(spec, pos, goals, labels, prev=prev, lam=lam)[1].churn for lam in (0, 0.1, 1, 10)]
        assert all(b <= a + 1e-6 for a, b in zip(churns, churns[1:]))


def test_suspect_loses_to_equal_healthy_substitute():
    spec = TeamSpec(np.ones((2, 1)), np.full((2, 1), 0.3), 2.0)
    pos = np.array([[0.3, 0.2], [0.7, 0.2]])
    goals = np.array([[0.5, 0.6]])
    for labels, winner in (([S, H], 1), ([H, S], 0)):
        _, sol = solve(spec, pos, goals, labels)
        assert sol.alpha[winner, 0] > sol.alpha[1 - winner, 0]


def test_infeasible_is_reported():
    spec = TeamSpec([[1.0]], [[0.0]], 1.0)
    prob = build_allocation_qp(spec, [[0.1, 0.1]], [[0.5, 0.5]], [[0.0]], [1.0], [1.0])
    # sabotage: demand a negative coverage so no point satisfies the equality
    prob.qp = QpProblem(prob.qp.P, prob.qp.q, prob.qp.G, prob.qp.h, prob.qp.A, -np.ones(1))
    with pytest.raises(AllocationInfeasible):
        solve_allocation(prob)
