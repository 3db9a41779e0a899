"""Recurrence vs matrix oracle, telescoping, exchangeability, sampling."""
import math

import numpy as np
import pytest

from sliceflow import autodiff as ad
from sliceflow.autodiff import Tape, Tensor
from sliceflow.optim import finite_difference_check
from sliceflow.process import (
    ExchangeableProcess,
    ProcessParams,
    ProcessState,
    init_state,
    joint_logpdf_oracle,
    oracle_conditioning,
    predictive_logpdf,
    predictive_params,
    sample_predictive,
    update_state,
)


def random_params(rng, dim=3, student_t=False, dof_range=(2.5, 30.0)):
    v = rng.uniform(0.3, 2.5, dim)
    rho = v * rng.uniform(0.05, 0.9, dim)
    mu = rng.normal(0.0, 1.0, dim)
    dof = rng.uniform(*dof_range, dim) if student_t else None
    return ProcessParams(mu, v, rho, dof)


def fold(params, observations):
    state = init_state(params)
    for z in observations:
        state = update_state(state, z, params)
    return state


class TestPriorState:
    def test_init_predictive_is_prior_gaussian(self):
        params = ProcessParams(np.array([0.3]), np.array([1.5]), np.array([0.4]))
        loc, s2, dof = predictive_params(init_state(params), params)
        np.testing.assert_allclose(loc, [0.3])
        np.testing.assert_allclose(s2, [1.5])
        assert dof is None

    def test_init_predictive_is_prior_student_t(self):
        params = ProcessParams(np.array([0.0]), np.array([1.0]), np.array([0.2]), np.array([7.0]))
        loc, s2, dof = predictive_params(init_state(params), params)
        np.testing.assert_allclose(loc, [0.0])
        np.testing.assert_allclose(s2, [1.0])
        np.testing.assert_allclose(dof, [7.0])

    def test_two_inits_identical(self):
        params = random_params(np.random.default_rng(0))
        a, b = init_state(params), init_state(params)
        assert a.count == b.count == 0
        np.testing.assert_array_equal(a.obs_sum, b.obs_sum)


class TestRecurrence:
    def test_hand_derived_two_by_two(self):
        # mu=0, v=1, rho=0.5, one observation z=1:
        # m = 0.5 * 1 = 0.5, s2 = 1 - 0.5^2 / 1 = 0.75
        params = ProcessParams(np.array([0.0]), np.array([1.0]), np.array([0.5]))
        state = fold(params, [np.array([1.0])])
        loc, s2, _ = predictive_params(state, params)
        np.testing.assert_allclose(loc, [0.5], rtol=1e-12)
        np.testing.assert_allclose(s2, [0.75], rtol=1e-12)

    def test_oracle_matches_hand_derived_case(self):
        params = ProcessParams(np.array([0.0]), np.array([1.0]), np.array([0.5]))
        loc, s2, _ = oracle_conditioning(params, np.array([[1.0]]))
        np.testing.assert_allclose(loc, [0.5], rtol=1e-12)
        np.testing.assert_allclose(s2, [0.75], rtol=1e-12)

    def test_zero_mean_observation_leaves_sums_unchanged(self):
        params = ProcessParams(np.zeros(2), np.ones(2), np.full(2, 0.3))
        state = fold(params, [np.zeros(2)])
        np.testing.assert_array_equal(state.obs_sum, 0.0)
        np.testing.assert_array_equal(state.obs_sq_sum, 0.0)
        assert state.count == 1

    @pytest.mark.parametrize("student_t", [False, True])
    def test_recurrence_equals_matrix_conditioning(self, student_t):
        rng = np.random.default_rng(42 if student_t else 43)
        for _ in range(30):
            params = random_params(rng, dim=3, student_t=student_t)
            obs = rng.normal(0.0, 1.2, (20, 3))
            state = init_state(params)
            for i, z in enumerate(obs):
                state = update_state(state, z, params)
                loc, s2, dof = predictive_params(state, params)
                o_loc, o_s2, o_dof = oracle_conditioning(params, obs[: i + 1])
                np.testing.assert_allclose(loc, o_loc, rtol=1e-8, atol=1e-10)
                np.testing.assert_allclose(s2, o_s2, rtol=1e-8, atol=1e-10)
                if student_t:
                    np.testing.assert_allclose(dof, o_dof, rtol=1e-12)

    def test_independent_dims_unchanged_gaussian(self):
        params = ProcessParams(np.array([0.4]), np.array([1.3]), np.array([0.0]))
        state = fold(params, [np.array([2.0]), np.array([-1.0]), np.array([0.7])])
        loc, s2, _ = predictive_params(state, params)
        np.testing.assert_allclose(loc, [0.4], rtol=1e-12)
        np.testing.assert_allclose(s2, [1.3], rtol=1e-12)

    def test_invalid_covariance_rejected(self):
        params = ProcessParams(np.array([0.0]), np.array([1.0]), np.array([1.0]))
        with pytest.raises(ValueError, match="covariance"):
            predictive_params(init_state(ProcessParams(np.zeros(1), np.ones(1), np.zeros(1))), params)

    def test_nonfinite_observation_rejected(self):
        params = random_params(np.random.default_rng(1))
        with pytest.raises(ValueError, match="finite"):
            update_state(init_state(params), np.array([np.nan, 0.0, 0.0]), params)

    def test_posterior_contraction(self):
        params = ProcessParams(np.array([0.0]), np.array([1.0]), np.array([0.4]))
        rng = np.random.default_rng(2)
        state = init_state(params)
        prev = np.inf
        for _ in range(40):
            state = update_state(state, rng.normal(size=1), params)
            _, s2, _ = predictive_params(state, params)
            assert s2[0] < prev
            prev = s2[0]
        assert prev > 1.0 - 0.4 - 1e-9  # floor at v - rho


class TestDensities:
    def test_standard_normal_at_zero(self):
        params = ProcessParams(np.array([0.0]), np.array([1.0]), np.array([0.0]))
        lp = predictive_logpdf(np.array([0.0]), init_state(params), params)
        np.testing.assert_allclose(lp, -0.5 * math.log(2 * math.pi), rtol=1e-12)

    def test_student_t_converges_to_gaussian(self):
        g = ProcessParams(np.array([0.2]), np.array([1.4]), np.array([0.3]))
        t = ProcessParams(np.array([0.2]), np.array([1.4]), np.array([0.3]), np.array([1e6]))
        for z in (-1.5, 0.0, 0.9, 2.3):
            lp_g = predictive_logpdf(np.array([z]), init_state(g), g)
            lp_t = predictive_logpdf(np.array([z]), init_state(t), t)
            assert abs(lp_g - lp_t) < 1e-3

    @pytest.mark.parametrize("student_t", [False, True])
    def test_predictive_is_joint_density_ratio(self, student_t):
        # scale-vs-variance convention arbiter: p(z_{n+1}|z_{1:n}) must equal
        # joint(z_{1:n+1}) / joint(z_{1:n}) from the matrix oracle
        rng = np.random.default_rng(3)
        for _ in range(10):
            params = random_params(rng, dim=2, student_t=student_t)
            obs = rng.normal(0.0, 1.0, (6, 2))
            for n in range(6):
                state = fold(params, obs[:n])
                lp = predictive_logpdf(obs[n], state, params)
                ratio = joint_logpdf_oracle(params, obs[: n + 1]) - joint_logpdf_oracle(params, obs[:n])
                assert abs(lp - ratio) < 1e-6

    @pytest.mark.parametrize("student_t", [False, True])
    def test_telescoping_sum_equals_joint(self, student_t):
        rng = np.random.default_rng(4)
        for _ in range(10):
            params = random_params(rng, dim=3, student_t=student_t)
            obs = rng.normal(0.0, 1.0, (20, 3))
            state = init_state(params)
            total = 0.0
            for z in obs:
                total += predictive_logpdf(z, state, params)
                state = update_state(state, z, params)
            joint = joint_logpdf_oracle(params, obs)
            assert abs(total - joint) < 1e-6

    def test_joint_single_observation_at_mean(self):
        v = 1.7
        params = ProcessParams(np.array([0.5, 0.5]), np.full(2, v), np.full(2, 0.2))
        lp = joint_logpdf_oracle(params, np.array([[0.5, 0.5]]))
        np.testing.assert_allclose(lp, 2 * (-0.5 * math.log(2 * math.pi * v)), rtol=1e-12)


class TestExchangeability:
    @pytest.mark.parametrize("student_t", [False, True])
    def test_joint_oracle_permutation_invariant(self, student_t):
        rng = np.random.default_rng(5)
        params = random_params(rng, dim=3, student_t=student_t)
        obs = rng.normal(0.0, 1.0, (8, 3))
        base = joint_logpdf_oracle(params, obs)
        for _ in range(5):
            perm = rng.permutation(8)
            assert abs(joint_logpdf_oracle(params, obs[perm]) - base) < 1e-6

    def test_state_permutation_invariant(self):
        rng = np.random.default_rng(6)
        params = random_params(rng, dim=4, student_t=True)
        obs = rng.normal(0.0, 1.0, (12, 4))
        s1 = fold(params, obs)
        s2 = fold(params, obs[rng.permutation(12)])
        loc1, v1, _ = predictive_params(s1, params)
        loc2, v2, _ = predictive_params(s2, params)
        np.testing.assert_allclose(loc1, loc2, atol=1e-8)
        np.testing.assert_allclose(v1, v2, atol=1e-8)


class TestSampling:
    def test_seeded_draws_identical(self):
        params = random_params(np.random.default_rng(7), student_t=True)
        state = init_state(params)
        a = sample_predictive(state, params, np.random.default_rng(11))
        b = sample_predictive(state, params, np.random.default_rng(11))
        np.testing.assert_array_equal(a, b)

    def test_degenerate_scale_returns_location(self):
        params = ProcessParams(np.array([0.7]), np.array([1.0]), np.array([0.3]))
        state = init_state(params)
        loc, s2, _ = predictive_params(state, params)
        squashed = ProcessParams(loc, s2 * 0.0 + 1e-30, s2 * 0.0)
        z = sample_predictive(init_state(squashed), squashed, np.random.default_rng(0))
        np.testing.assert_allclose(z, [0.7], atol=1e-12)

    def test_monte_carlo_mean_gaussian(self):
        params = ProcessParams(np.array([0.4]), np.array([1.0]), np.array([0.5]))
        state = fold(params, [np.array([1.2]), np.array([0.8])])
        loc, s2, _ = predictive_params(state, params)
        n = 100_000
        draws = sample_predictive(state, params, np.random.default_rng(12), n_samples=n)
        tol = 4.0 * math.sqrt(s2[0]) / math.sqrt(n)
        assert abs(draws.mean() - loc[0]) < tol

    def test_student_t_tail_heavier_than_gaussian(self):
        params = ProcessParams(np.array([0.0]), np.array([1.0]), np.array([0.1]), np.array([3.0]))
        draws = sample_predictive(init_state(params), params, np.random.default_rng(13), n_samples=50_000)
        assert np.abs(draws).max() > 6.0  # nu=3 tails reach far beyond a unit Gaussian


class TestLearnableContainer:
    def test_constraints_hold_for_random_raw_values(self):
        rng = np.random.default_rng(14)
        proc = ExchangeableProcess(dim=16, mode="student-t")
        for _ in range(20):
            proc.mean.data[...] = rng.normal(0, 10, 16)
            proc.raw_variance.data[...] = rng.normal(0, 10, 16)
            proc.raw_covariance.data[...] = rng.normal(0, 10, 16)
            proc.raw_dof.data[...] = rng.normal(0, 10, 16)
            p = proc.snapshot()
            assert np.all(p.covariance >= 0)
            assert np.all(p.covariance < p.variance)
            assert np.all(p.dof > 2)

    def test_default_init_near_unit_gaussian(self):
        proc = ExchangeableProcess(dim=4, mode="student-t")
        p = proc.snapshot()
        np.testing.assert_allclose(p.mean, 0.0)
        np.testing.assert_allclose(p.variance, 1.0, rtol=1e-5)
        np.testing.assert_allclose(p.covariance, 0.1, rtol=1e-4)
        np.testing.assert_allclose(p.dof, 1000.0, rtol=1e-4)

    def test_gaussian_mode_has_no_dof(self):
        proc = ExchangeableProcess(dim=4, mode="gaussian")
        assert proc.raw_dof is None
        assert len(proc.parameters()) == 3

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            ExchangeableProcess(dim=4, mode="cauchy")

    @pytest.mark.parametrize("mode", ["gaussian", "student-t"])
    def test_logpdf_gradients_match_oracle(self, mode):
        with ad.precision(np.float64):
            proc = ExchangeableProcess(dim=5, mode=mode, init_dof=8.0)
            rng = np.random.default_rng(15)
            zs = rng.normal(0.0, 1.0, (4, 5))

            def f(params_list):
                p = proc.constrained()
                state = init_state(p)
                total = None
                for z in zs:
                    zt = Tensor(z.astype(np.float64))
                    lp = predictive_logpdf(zt, state, p)
                    total = lp if total is None else total + lp
                    state = update_state(state, zt, p)
                return -total

            err = finite_difference_check(f, proc.parameters(), eps=1e-6)
            assert err < 1e-5
