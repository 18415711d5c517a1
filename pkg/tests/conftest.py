"""Shared fixtures and independent helper oracles for the test suite."""

import math

import numpy as np
import pytest

from bridgesolve import BridgeProblem, ScheduleParams
from bridgesolve.models import bridge_marginal_coeffs


@pytest.fixture
def ve():
    return ScheduleParams.ve()


@pytest.fixture
def vp():
    return ScheduleParams.vp()


@pytest.fixture
def ve_problem(ve):
    return BridgeProblem(schedule=ve, x_T=np.array([1.0]))


@pytest.fixture
def vp_problem(vp):
    return BridgeProblem(schedule=vp, x_T=np.array([0.8, -0.4]))


def posterior_reparam_step(problem, x_s, s, t, x_T, d_out):
    """Posterior-reparameterization update, coded independently of the
    exponential-integrator route: with (a, b, c^2) the pinned-marginal
    coefficients,

        x_t = a_t x_T + b_t D + (c_t / c_s) (x_s - a_s x_T - b_s D).
    """
    a_s, b_s, c2_s = bridge_marginal_coeffs(problem, s)
    a_t, b_t, c2_t = bridge_marginal_coeffs(problem, t)
    ratio = math.sqrt(c2_t / c2_s)
    return a_t * x_T + b_t * d_out + ratio * (x_s - a_s * x_T - b_s * d_out)


def trapezoid_posterior_mean(x, x_T, a, b, c2, mu0, v0, span=14.0, n=6001):
    """1D posterior mean E[x_0 | x_t] by trapezoid quadrature over x_0."""
    lo = mu0 - span * math.sqrt(v0)
    hi = mu0 + span * math.sqrt(v0)
    x0 = np.linspace(lo, hi, n)
    log_w = (-0.5 * (x - a * x_T - b * x0) ** 2 / c2
             - 0.5 * (x0 - mu0) ** 2 / v0)
    w = np.exp(log_w - log_w.max())
    return float(np.trapezoid(w * x0, x0) / np.trapezoid(w, x0))
