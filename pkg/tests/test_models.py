"""Analytic priors and posterior-mean denoisers."""

import math

import numpy as np
import pytest

from bridgesolve import (
    AffineLambdaDenoiser,
    BridgeProblem,
    ConfigError,
    ConstantDenoiser,
    GaussianPrior,
    GmmPrior,
    GaussianPosteriorDenoiser,
    GmmPosteriorDenoiser,
    alpha,
    half_log_snr,
    gaussian_posterior_denoiser,
    gmm_posterior_denoiser,
)
from bridgesolve.models import bridge_marginal_coeffs
from bridgesolve.solvers import sde_step_from_noise

from conftest import trapezoid_posterior_mean


class TestPriorValidation:
    def test_gaussian_rejects_bad_variance(self):
        with pytest.raises(ConfigError):
            GaussianPrior(mean=[0.0], var=[0.0])

    def test_gmm_normalizes_weights(self):
        prior = GmmPrior(weights=[0.5, 0.5], means=[[0.0], [1.0]],
                         vars=[[1.0], [1.0]])
        assert prior.weights.sum() == pytest.approx(1.0, abs=1e-15)

    def test_gmm_rejects_unnormalized(self):
        with pytest.raises(ConfigError):
            GmmPrior(weights=[0.5, 0.6], means=[[0.0], [1.0]],
                     vars=[[1.0], [1.0]])

    def test_gmm_rejects_mismatched_components(self):
        with pytest.raises(ConfigError):
            GmmPrior(weights=[1.0], means=[[0.0], [1.0]], vars=[[1.0], [1.0]])


class TestBridgeMarginalCoeffs:
    def test_endpoint_pinning(self, vp_problem):
        a, b, c2 = bridge_marginal_coeffs(vp_problem, 1.0)
        assert (a, b, c2) == (1.0, 0.0, 0.0)

    def test_data_end_pinning(self, ve_problem):
        a, b, c2 = bridge_marginal_coeffs(ve_problem, ve_problem.schedule.t_min)
        assert abs(a) < 1e-7
        assert b == pytest.approx(alpha(ve_problem.schedule, 1e-4), abs=1e-7)
        assert c2 < 1e-7

    def test_matches_initial_sde_step_law(self, vp_problem):
        """Sampling with (a, b, c) coincides in law with the one-step SDE
        solution from s = T; Monte-Carlo moment match within 3 SE."""
        t = 0.55
        a, b, c2 = bridge_marginal_coeffs(vp_problem, t)
        n = 10 ** 5
        rng = np.random.default_rng(21)
        d_out = np.array([0.3, -0.6])
        x_s = np.tile(vp_problem.x_T, (n, 1))
        z = rng.standard_normal((n, 2))
        out = sde_step_from_noise(vp_problem, x_s, 1.0, t, d_out, z)
        mean_expect = a * vp_problem.x_T + b * d_out
        se_mean = math.sqrt(c2 / n)
        assert np.all(np.abs(out.mean(axis=0) - mean_expect) < 3 * se_mean)
        se_var = c2 * math.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(out.var(axis=0) - c2) < 3 * se_var)


class TestGaussianPosterior:
    def test_observation_dominates_near_data_end(self, ve):
        problem = BridgeProblem(schedule=ve, x_T=np.array([1.0]))
        prior = GaussianPrior(mean=[5.0], var=[2.0])
        t = ve.t_min
        x = np.array([0.73])
        out = gaussian_posterior_denoiser(prior, problem, x, t)
        assert out == pytest.approx(x / alpha(ve, t), abs=1e-4)

    def test_prior_dominates_at_endpoint(self, vp_problem):
        prior = GaussianPrior(mean=[0.4, -0.1], var=[0.5, 0.5])
        out = gaussian_posterior_denoiser(prior, vp_problem, vp_problem.x_T, 1.0)
        assert out == pytest.approx([0.4, -0.1], abs=1e-12)

    def test_quadrature_oracle_1d(self, ve):
        problem = BridgeProblem(schedule=ve, x_T=np.array([1.2]))
        prior = GaussianPrior(mean=[0.4], var=[0.7])
        rng = np.random.default_rng(31)
        for _ in range(20):
            t = rng.uniform(ve.t_min, 0.99)
            x = float(rng.uniform(-1.5, 2.0))
            a, b, c2 = bridge_marginal_coeffs(problem, t)
            expect = trapezoid_posterior_mean(x, 1.2, a, b, c2, 0.4, 0.7)
            got = gaussian_posterior_denoiser(prior, problem, np.array([x]), t)
            assert got[0] == pytest.approx(expect, abs=1e-8)

    def test_monte_carlo_regression(self, ve):
        """E[x_0 | x_t in window] from 1e6 joint draws; the posterior mean
        is linear in x, so comparing at the window's sample mean is
        bias-free."""
        problem = BridgeProblem(schedule=ve, x_T=np.array([0.9]))
        prior = GaussianPrior(mean=[0.2], var=[0.8])
        t = 0.45
        a, b, c2 = bridge_marginal_coeffs(problem, t)
        rng = np.random.default_rng(37)
        n = 10 ** 6
        x0 = 0.2 + math.sqrt(0.8) * rng.standard_normal(n)
        xt = a * 0.9 + b * x0 + math.sqrt(c2) * rng.standard_normal(n)
        for center in (-0.2, 0.3, 0.8):
            mask = np.abs(xt - center) < 0.05
            assert mask.sum() > 5000
            window_mean_x = float(xt[mask].mean())
            mc = float(x0[mask].mean())
            se = float(x0[mask].std() / math.sqrt(mask.sum()))
            got = gaussian_posterior_denoiser(prior, problem,
                                              np.array([window_mean_x]), t)
            assert abs(got[0] - mc) < 5 * se


class TestGmmPosterior:
    def test_single_component_reduces_to_gaussian(self, vp_problem):
        prior1 = GmmPrior(weights=[1.0], means=[[0.3, -0.4]],
                          vars=[[0.6, 0.9]])
        prior2 = GaussianPrior(mean=[0.3, -0.4], var=[0.6, 0.9])
        rng = np.random.default_rng(41)
        for _ in range(50):
            t = rng.uniform(vp_problem.schedule.t_min, 1.0)
            x = rng.standard_normal(2)
            got = gmm_posterior_denoiser(prior1, vp_problem, x, t)
            expect = gaussian_posterior_denoiser(prior2, vp_problem, x, t)
            assert np.allclose(got, expect, atol=1e-12)

    def test_symmetry_point(self, ve):
        """A symmetric two-component mixture observed at the symmetry point
        returns the symmetry point."""
        problem = BridgeProblem(schedule=ve, x_T=np.array([0.0]))
        prior = GmmPrior(weights=[0.5, 0.5], means=[[-1.0], [1.0]],
                         vars=[[0.4], [0.4]])
        for t in (0.2, 0.6, 0.95):
            out = gmm_posterior_denoiser(prior, problem, np.array([0.0]), t)
            assert out == pytest.approx([0.0], abs=1e-13)

    def test_quadrature_oracle_1d(self, ve):
        problem = BridgeProblem(schedule=ve, x_T=np.array([0.5]))
        prior = GmmPrior(weights=[0.3, 0.7], means=[[-0.8], [1.1]],
                         vars=[[0.3], [0.5]])
        rng = np.random.default_rng(43)
        for _ in range(15):
            t = rng.uniform(ve.t_min, 0.99)
            x = float(rng.uniform(-1.5, 2.0))
            a, b, c2 = bridge_marginal_coeffs(problem, t)
            x0 = np.linspace(-10.0, 11.0, 40001)
            like = np.exp(-0.5 * (x - a * 0.5 - b * x0) ** 2 / c2)
            dens = (0.3 * np.exp(-0.5 * (x0 + 0.8) ** 2 / 0.3) / math.sqrt(0.3)
                    + 0.7 * np.exp(-0.5 * (x0 - 1.1) ** 2 / 0.5) / math.sqrt(0.5))
            w = like * dens
            expect = float(np.trapezoid(w * x0, x0) / np.trapezoid(w, x0))
            got = gmm_posterior_denoiser(prior, problem, np.array([x]), t)
            assert got[0] == pytest.approx(expect, abs=1e-7)

    def test_batched_evaluation_matches_rows(self, vp_problem):
        prior = GmmPrior(weights=[0.6, 0.4], means=[[-1.0, 0.0], [1.0, 0.5]],
                         vars=[[0.3, 0.3], [0.2, 0.4]])
        rng = np.random.default_rng(47)
        xs = rng.standard_normal((8, 2))
        batched = gmm_posterior_denoiser(prior, vp_problem, xs, 0.5)
        rows = np.stack([gmm_posterior_denoiser(prior, vp_problem, x, 0.5)
                         for x in xs])
        assert np.allclose(batched, rows, atol=1e-15)


class TestProbeDenoisers:
    def test_constant_ignores_input(self, ve):
        den = ConstantDenoiser([0.7])
        out = den(np.array([123.0]), 0.5, np.array([1.0]), 1.0)
        assert out == pytest.approx([0.7])

    def test_affine_lambda_linearity(self, ve):
        den = AffineLambdaDenoiser([0.1], [0.5], ve)
        x = np.array([0.0])
        xT = np.array([1.0])
        for t in (0.3, 0.7):
            lam = half_log_snr(ve, t)
            assert den(x, t, xT, 1.0) == pytest.approx([0.1 + 0.5 * lam])

    def test_counters_increment_once_per_call(self, ve, vp_problem):
        dens = [
            ConstantDenoiser([0.0, 0.0]),
            AffineLambdaDenoiser([0.0, 0.0], [1.0, 1.0], vp_problem.schedule),
            GaussianPosteriorDenoiser(GaussianPrior(mean=[0.0, 0.0],
                                                    var=[1.0, 1.0]),
                                      vp_problem.schedule),
            GmmPosteriorDenoiser(GmmPrior(weights=[1.0], means=[[0.0, 0.0]],
                                          vars=[[1.0, 1.0]]),
                                 vp_problem.schedule),
        ]
        x = np.zeros(2)
        for den in dens:
            for k in range(3):
                den(x, 0.5, vp_problem.x_T, 1.0)
                assert den.nfe == k + 1

    def test_counting_disabled_context(self, vp_problem):
        den = ConstantDenoiser([0.0, 0.0])
        with den.counting_disabled():
            den(np.zeros(2), 0.5, vp_problem.x_T, 1.0)
        assert den.nfe == 0
        den(np.zeros(2), 0.5, vp_problem.x_T, 1.0)
        assert den.nfe == 1
