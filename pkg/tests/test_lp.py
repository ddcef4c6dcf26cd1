import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from cmdpgrad import policy as pol
from cmdpgrad.lp import (
    build_lp,
    randomized_states,
    solve_lp,
    solve_model,
    solve_standard,
    theta_from_pi,
)
from cmdpgrad.mdp import MdpModel, analyze

from conftest import interior_alpha, random_model


def feasible_model(rng, L=1, ragged=False, **kw):
    """Random model whose bounds are met, with slack, by some random policy."""
    m = random_model(rng, n_constraints=L, ragged=ragged, **kw)
    theta = pol.theta_from_alpha(interior_alpha(rng, m), m.action_counts)
    pi = analyze(m, theta).pi
    bounds = m.constraints @ pi + rng.uniform(0.0, 0.5, L)
    return MdpModel(m.action_counts, m.pair_transitions, m.cost, m.constraints, bounds)


def vertex_optimum(lp):
    """Brute force over basic solutions of the standard-form system."""
    n, L = lp.num_vars, lp.b_ub.size
    A = np.zeros((lp.b_eq.size + L, n + L))
    A[:lp.b_eq.size, :n] = lp.A_eq
    A[lp.b_eq.size:, :n] = lp.A_ub
    A[lp.b_eq.size:, n:] = np.eye(L)
    b = np.r_[lp.b_eq, lp.b_ub]
    # drop dependent rows
    q, r = np.linalg.qr(A.T)
    keep = np.abs(np.diag(r)) > 1e-10
    A, b = A[keep], b[keep]
    m = A.shape[0]
    c = np.r_[lp.c, np.zeros(L)]
    best = np.inf
    for cols in itertools.combinations(range(n + L), m):
        B = A[:, cols]
        if abs(np.linalg.det(B)) < 1e-12:
            continue
        xb = np.linalg.solve(B, b)
        if np.all(xb >= -1e-10):
            best = min(best, c[list(cols)] @ xb)
    return best


def kt_check(lp, sol, tol=1e-7):
    red = lp.c - lp.A_eq.T @ sol.duals_eq
    if lp.b_ub.size:
        red = red + lp.A_ub.T @ sol.duals_ub
        slack = lp.b_ub - lp.A_ub @ sol.x
        assert np.all(sol.duals_ub >= -tol)
        assert np.all(np.abs(sol.duals_ub * slack) < tol)
    assert np.all(red >= -tol)
    assert abs(red @ sol.x) < tol


class TestBuild:
    def test_dimensions(self, track_a):
        lp = build_lp(track_a)
        assert lp.num_vars == 6
        assert lp.A_eq.shape == (3, 6)
        assert lp.A_ub.shape == (2, 6)
        assert np.linalg.matrix_rank(lp.A_eq[:2]) == 1

    def test_no_constraints(self, est_model):
        lp = build_lp(est_model)
        assert lp.A_ub.shape == (0, 6)
        sol = solve_lp(lp)
        # unconstrained: some deterministic policy is optimal
        best = min(analyze(est_model, np.eye(3)[[a0, a1]]).values[0]
                   for a0, a1 in itertools.product(range(3), repeat=2))
        assert sol.value == pytest.approx(best, abs=1e-9)
        kt_check(lp, sol)

    def test_single_state(self):
        m = MdpModel.from_dense(np.ones((3, 1, 1)), [[4.0, 1.0, 2.0]], [[[0.0, 1.0, 0.0]]], [0.25])
        sol = solve_lp(build_lp(m))
        # at most 1/4 weight on the cheapest action, the rest on the next cheapest
        assert sol.value == pytest.approx(0.25 * 1.0 + 0.75 * 2.0)


class TestReferenceModels:
    @pytest.mark.parametrize("method", ["simplex", "highs"])
    def test_pre_switch(self, track_a, method):
        sol, theta = solve_model(track_a, method)
        assert sol.value == pytest.approx(-111.80, abs=0.01)
        np.testing.assert_allclose(track_a.table(theta), [[0, 0.2, 0.8], [0, 0.28, 0.72]], atol=0.005)

    @pytest.mark.parametrize("method", ["simplex", "highs"])
    def test_post_switch(self, track_b, method):
        sol, _ = solve_model(track_b, method)
        assert sol.value == pytest.approx(-44.52, abs=0.01)

    def test_round_trip_cost(self, track_a):
        sol, theta = solve_model(track_a)
        an = analyze(track_a, theta)
        assert an.values[0] == pytest.approx(sol.value, abs=1e-6)
        assert np.all(an.values[1:] <= 1e-9)

    def test_kt_conditions(self, track_a, track_b):
        for m in (track_a, track_b):
            lp = build_lp(m)
            kt_check(lp, solve_lp(lp, "simplex"))


class TestRandomLps:
    @pytest.mark.parametrize("seed", range(12))
    def test_vertex_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        m = feasible_model(rng, L=int(rng.integers(0, 3)), n_states=int(rng.integers(2, 4)), n_actions=2)
        lp = build_lp(m)
        sol = solve_lp(lp, "simplex")
        assert sol.optimal
        assert sol.value == pytest.approx(vertex_optimum(lp), abs=1e-8)

    @given(st.integers(0, 100_000))
    @settings(max_examples=40, deadline=None)
    def test_matches_scipy_and_kt(self, seed):
        rng = np.random.default_rng(seed)
        m = feasible_model(rng, L=int(rng.integers(1, 3)), ragged=True)
        lp = build_lp(m)
        sol = solve_lp(lp, "simplex")
        ref = linprog(lp.c, A_ub=lp.A_ub, b_ub=lp.b_ub, A_eq=lp.A_eq, b_eq=lp.b_eq, bounds=(0, None))
        assert sol.value == pytest.approx(ref.fun, abs=1e-8)
        assert np.all(sol.x >= 0)
        np.testing.assert_allclose(lp.A_eq @ sol.x, lp.b_eq, atol=1e-9)
        assert np.all(lp.A_ub @ sol.x <= lp.b_ub + 1e-9)
        kt_check(lp, sol)

    @given(st.integers(0, 100_000))
    @settings(max_examples=30, deadline=None)
    def test_lower_bounds_every_feasible_policy(self, seed):
        rng = np.random.default_rng(seed)
        m = feasible_model(rng, L=1)
        sol, _ = solve_model(m)
        theta = pol.theta_from_alpha(interior_alpha(rng, m), m.action_counts)
        an = analyze(m, theta)
        if np.all(an.values[1:] <= 0):
            assert an.values[0] >= sol.value - 1e-9

    @given(st.integers(0, 100_000))
    @settings(max_examples=30, deadline=None)
    def test_randomizes_in_at_most_L_states(self, seed):
        rng = np.random.default_rng(seed)
        L = int(rng.integers(1, 3))
        m = feasible_model(rng, L=L, n_states=4, n_actions=3)
        sol, theta = solve_model(m, "simplex")
        assert len(randomized_states(theta, m.action_counts, sol.x)) <= L

    def test_infeasible(self):
        rng = np.random.default_rng(0)
        m = random_model(rng, n_constraints=1)
        m = MdpModel(m.action_counts, m.pair_transitions, m.cost, np.ones((1, m.num_pairs)), [-1.0])
        for method in ("simplex", "highs"):
            sol = solve_lp(build_lp(m), method)
            assert sol.status == "infeasible" and not sol.optimal

    def test_standard_form_degenerate(self):
        # a classic cycling example for largest-coefficient pivoting
        c = np.array([-0.75, 150, -0.02, 6, 0, 0, 0])
        A = np.array([[0.25, -60, -0.04, 9, 1, 0, 0],
                      [0.5, -90, -0.02, 3, 0, 1, 0],
                      [0, 0, 1, 0, 0, 0, 1]])
        status, x, _, _ = solve_standard(c, A, np.array([0.0, 0.0, 1.0]))
        assert status == "optimal"
        assert c @ x == pytest.approx(-0.05)


class TestThetaFromPi:
    def test_pure_rows(self):
        t = theta_from_pi([0.0, 0.3, 0.7, 0.0], [2, 2])
        np.testing.assert_array_equal(t, [0, 1, 1, 0])

    def test_zero_mass_warns(self):
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            t = theta_from_pi([0.5, 0.5, 0.0, 0.0, 0.0], [2, 3])
        assert any(issubclass(x.category, RuntimeWarning) for x in w)
        np.testing.assert_allclose(t[2:], 1 / 3)

    def test_randomized_skips_empty_states(self):
        pi = np.array([1.0, 0.0, 0.0, 0.0])
        theta = np.array([1.0, 0.0, 0.5, 0.5])
        assert randomized_states(theta, [2, 2]) == [1]
        assert randomized_states(theta, [2, 2], pi) == []
