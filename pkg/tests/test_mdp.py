import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmdpgrad import policy as pol
from cmdpgrad.mdp import (
    MdpModel,
    ModelError,
    Simulator,
    UnichainError,
    analyze,
    build_augmented_kernel,
    derivative_kernel,
    exact_gradient,
    exact_psi_gradient,
    hitting_times,
    potential_vector,
    realization_factor_gradient,
    simulate_trajectory,
    stationary_distribution,
)

from conftest import interior_alpha, random_model


def _cost_at(model, alpha, row=0):
    an = analyze(model, pol.theta_from_alpha(alpha, model.action_counts))
    return an.values[row] + (model.bounds[row - 1] if row else 0.0)


class TestModel:
    def test_estimation_model_shape(self, est_model):
        assert est_model.num_states == 2
        assert est_model.num_pairs == 6
        assert est_model.num_components == 4
        assert est_model.num_constraints == 0

    def test_rows_must_sum_to_one(self):
        A = np.array([[[0.5, 0.6], [0.5, 0.5]]])
        with pytest.raises(ModelError):
            MdpModel.from_dense(A, np.zeros((2, 1)))

    def test_negative_probability(self):
        A = np.array([[[1.2, -0.2], [0.5, 0.5]]])
        with pytest.raises(ModelError):
            MdpModel.from_dense(A, np.zeros((2, 1)))

    def test_bound_count(self):
        A = np.full((2, 2, 2), 0.5)
        with pytest.raises(ModelError):
            MdpModel.from_dense(A, np.zeros((2, 2)), np.zeros((1, 2, 2)), [0.0, 1.0])

    def test_ragged_ignores_unavailable(self):
        A = np.full((2, 2, 2), 0.5)
        A[1, 1] = np.nan
        c = np.array([[1.0, 2.0], [3.0, np.nan]])
        m = MdpModel.from_dense(A, c, action_counts=[2, 1])
        assert m.num_pairs == 3
        np.testing.assert_array_equal(m.cost, [1, 2, 3])
        with pytest.raises(ModelError):
            m.pair_index(1, 1)

    def test_immutable(self, est_model):
        with pytest.raises(ValueError):
            est_model.cost[0] = 1.0

    def test_flat_theta_validates(self, est_model):
        with pytest.raises(ModelError):
            est_model.flat_theta([[0.5, 0.5, 0.1], [1, 0, 0]])


class TestStationary:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_eigenvector(self, seed):
        rng = np.random.default_rng(seed)
        m = random_model(rng, ragged=True)
        theta = pol.theta_from_alpha(interior_alpha(rng, m), m.action_counts)
        P = build_augmented_kernel(m, theta).matrix
        pi = stationary_distribution(P)
        w, v = np.linalg.eig(P.T)
        ref = np.real(v[:, np.argmin(np.abs(w - 1))])
        np.testing.assert_allclose(pi, ref / ref.sum(), atol=1e-12)

    def test_augmented_rows_stochastic(self, est_model, est_theta):
        P = build_augmented_kernel(est_model, est_theta).matrix
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-14)

    def test_two_closed_classes(self):
        with pytest.raises(UnichainError):
            stationary_distribution(np.eye(2))

    def test_transient_state_gets_zero(self):
        P = np.array([[0.5, 0.5, 0.0], [0.0, 0.3, 0.7], [0.0, 0.6, 0.4]])
        pi = stationary_distribution(P)
        assert pi[0] == 0.0
        np.testing.assert_allclose(pi @ P, pi, atol=1e-14)


class TestPoisson:
    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_residual_and_normalization(self, seed):
        rng = np.random.default_rng(seed)
        m = random_model(rng)
        theta = pol.theta_from_alpha(interior_alpha(rng, m), m.action_counts)
        ker = build_augmented_kernel(m, theta)
        pi = stationary_distribution(ker)
        pv = potential_vector(ker, pi, m.cost)
        assert pv.residual < 1e-9
        assert abs(pi @ pv.values) < 1e-9

    def test_constant_cost_zero_potential(self, est_model, est_theta):
        ker = build_augmented_kernel(est_model, est_theta)
        pi = stationary_distribution(ker)
        g = potential_vector(ker, pi, np.full(6, 3.0)).values
        np.testing.assert_allclose(g, 0.0, atol=1e-12)


class TestDerivativeKernel:
    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_rows_sum_to_zero(self, seed):
        rng = np.random.default_rng(seed)
        m = random_model(rng, ragged=True)
        a = interior_alpha(rng, m)
        for i, p in pol.component_labels(m.action_counts):
            Q = derivative_kernel(m, a, (i, p))
            np.testing.assert_allclose(Q.sum(axis=1), 0.0, atol=1e-13)

    def test_boundary_rejected(self, est_model):
        a = np.array([0.0, 0.5, 0.5, 0.5])
        with pytest.raises(pol.BoundaryError):
            derivative_kernel(est_model, a, (0, 1))

    def test_bad_component(self, est_model, est_alpha):
        with pytest.raises(ModelError):
            derivative_kernel(est_model, est_alpha, (0, 3))


class TestExactGradient:
    def test_reference_point(self, est_model, est_alpha):
        g = exact_gradient(est_model, est_alpha, check=True)
        np.testing.assert_allclose(g[0], [45.05, -55.07, 187.58, -159.91], atol=0.01)

    def test_psi_reference_point(self, est_model, est_theta):
        g = exact_psi_gradient(est_model, est_theta)
        expect = [-9.010, 18.680, -9.670, -45.947, 68.323, -22.377]
        np.testing.assert_allclose(g[0], expect, atol=0.01)

    @pytest.mark.parametrize("seed", range(20))
    def test_central_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        m = random_model(rng, n_constraints=2, ragged=seed % 2 == 1)
        a = interior_alpha(rng, m, margin=0.1)
        g = exact_gradient(m, a)
        h = 1e-5
        for row in range(g.shape[0]):
            fd = np.empty(a.size)
            for k in range(a.size):
                e = np.zeros_like(a)
                e[k] = h
                fd[k] = (_cost_at(m, a + e, row) - _cost_at(m, a - e, row)) / (2 * h)
            scale = np.maximum(np.abs(fd), 1e-3)
            assert np.max(np.abs(g[row] - fd) / scale) < 1e-4

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_two_forms_agree(self, seed):
        rng = np.random.default_rng(seed)
        m = random_model(rng, ragged=True)
        a = interior_alpha(rng, m)
        np.testing.assert_allclose(exact_gradient(m, a), realization_factor_gradient(m, a), rtol=1e-9, atol=1e-9)

    def test_psi_vs_finite_difference(self):
        rng = np.random.default_rng(7)
        m = random_model(rng, n_states=3, n_actions=3)
        psi = rng.normal(size=m.num_pairs)
        g = exact_psi_gradient(m, pol.softmax_rows(psi, m.action_counts), f=m.cost)
        h = 1e-6
        fd = np.empty(psi.size)
        for k in range(psi.size):
            e = np.zeros_like(psi)
            e[k] = h
            up = analyze(m, pol.softmax_rows(psi + e, m.action_counts)).values[0]
            dn = analyze(m, pol.softmax_rows(psi - e, m.action_counts)).values[0]
            fd[k] = (up - dn) / (2 * h)
        np.testing.assert_allclose(g, fd, atol=1e-6)

    def test_single_vector_shape(self, est_model, est_alpha):
        assert exact_gradient(est_model, est_alpha, f=est_model.cost).shape == (4,)


class TestHittingTimes:
    def test_against_fundamental_matrix(self, est_model, est_theta):
        P = build_augmented_kernel(est_model, est_theta).matrix
        pi = stationary_distribution(P)
        n = P.shape[0]
        Z = np.linalg.inv(np.eye(n) - P + np.outer(np.ones(n), pi))
        for t in range(n):
            h = hitting_times(P, t)
            ref = (Z[t, t] - Z[:, t]) / pi[t]
            ref[t] = 1.0 / pi[t]  # mean return time
            np.testing.assert_allclose(h, ref, rtol=1e-10)


class TestSimulator:
    def test_seed_determinism(self, est_model, est_theta):
        a = simulate_trajectory(est_model, est_theta, 500, seed=11)
        b = simulate_trajectory(est_model, est_theta, 500, seed=11)
        c = simulate_trajectory(est_model, est_theta, 500, seed=12)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        assert not np.array_equal(a[1], c[1])

    def test_chunking_invariant(self, est_model, est_theta):
        s1 = Simulator(est_model, est_theta, 5, x0=0)
        whole = s1.run(1000)
        s2 = Simulator(est_model, est_theta, 5, x0=0)
        parts = [s2.run(n) for n in (1, 299, 700)]
        for k in range(3):
            np.testing.assert_array_equal(whole[k], np.concatenate([p[k] for p in parts]))

    def test_empirical_occupation(self, est_model, est_theta):
        s, a = simulate_trajectory(est_model, est_theta, 200_000, seed=3)
        pairs = est_model.offsets[s] + a
        freq = np.bincount(pairs, minlength=6) / pairs.size
        pi = analyze(est_model, est_theta).pi
        np.testing.assert_allclose(freq, pi, atol=5e-3)

    def test_bad_start(self, est_model, est_theta):
        with pytest.raises(ModelError):
            Simulator(est_model, est_theta, 0, x0=5)
