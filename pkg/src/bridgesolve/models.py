"""Analytic denoisers and priors standing in for a trained x0-predictor.

With a Gaussian or Gaussian-mixture prior over x_0 (taken independent of
the pinned endpoint), the bridge marginal

    x_t | x_0, x_T ~ N(a_t x_T + b_t x_0, c_t^2 I)

has a closed-form posterior mean E[x_0 | x_t, x_T], which is exactly the
quantity a bridge denoiser network estimates. Covariances are diagonal so
posteriors stay coordinate-separable.

Numerical note: the naive posterior-precision terms b^2/c^2 and b/c^2 are
0/0 at t = T. The algebraically identical forms

    b^2/c^2 = SNR_t - SNR_T,     b/c^2 = alpha_t / sigma_t^2

are finite on all of [t_min, T], so the denoisers here accept t = T and
return the correct limit (the prior mean, for a single Gaussian).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bridge import BridgeProblem, Denoiser
from .errors import ConfigError, DomainError
from .schedules import ScheduleParams, alpha, half_log_snr, sigma


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """Diagonal Gaussian prior over x_0."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        v = np.atleast_1d(np.asarray(self.var, dtype=float))
        if m.shape != v.shape:
            raise ConfigError("mean and var must have matching shapes")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v)) and np.all(v > 0)):
            raise ConfigError("prior needs finite mean and positive variance")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "var", v)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True, eq=False)
class GmmPrior:
    """Mixture of diagonal Gaussians over x_0; weights sum to one."""

    weights: np.ndarray
    means: np.ndarray
    vars: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        v = np.atleast_2d(np.asarray(self.vars, dtype=float))
        if not (len(w) == len(m) == len(v)) or m.shape != v.shape:
            raise ConfigError("component counts of weights/means/vars must agree")
        if not (np.all(w > 0) and np.all(v > 0)):
            raise ConfigError("weights and variances must be positive")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ConfigError("weights must sum to 1 within 1e-12")
        object.__setattr__(self, "weights", w / w.sum())
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "vars", v)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]


def bridge_marginal_coeffs(problem: BridgeProblem, t):
    """(a_t, b_t, c_t^2) of the pinned marginal N(a_t x_T + b_t x_0, c_t^2 I).

    a_t = (SNR_T/SNR_t)(alpha_t/alpha_T), b_t = alpha_t (1 - SNR_T/SNR_t),
    c_t^2 = sigma_t^2 (1 - SNR_T/SNR_t). At t = T this is exactly (1, 0, 0).
    """
    params = problem.schedule
    t = float(t)
    if not (params.t_min <= t <= problem.T):
        raise DomainError(f"bridge_marginal_coeffs: t={t!r} outside [t_min, T]")
    lam_t = half_log_snr(params, t)
    lam_T = half_log_snr(params, problem.T)
    a_t = alpha(params, t)
    a_T = alpha(params, problem.T)
    one_minus = -math.expm1(-2.0 * (lam_t - lam_T))
    a = math.exp(2.0 * (lam_T - lam_t)) * (a_t / a_T)
    b = a_t * one_minus
    c2 = sigma(params, t) ** 2 * one_minus
    return a, b, c2


def _posterior_terms(params: ScheduleParams, t: float, T: float):
    """Per-time scalars shared by the posterior denoisers:
    (a_t, data precision SNR_t - SNR_T, data weight alpha_t / sigma_t^2,
    likelihood spread b_t^2, c_t^2)."""
    lam_t = half_log_snr(params, t)
    lam_T = half_log_snr(params, T)
    a_t = alpha(params, t)
    a_T = alpha(params, T)
    sig2 = sigma(params, t) ** 2
    one_minus = -math.expm1(-2.0 * (lam_t - lam_T))
    a = math.exp(2.0 * (lam_T - lam_t)) * (a_t / a_T)
    prec_data = math.exp(2.0 * lam_t) - math.exp(2.0 * lam_T)  # b^2 / c^2
    weight_data = a_t / sig2                                   # b / c^2
    b = a_t * one_minus
    c2 = sig2 * one_minus
    return a, prec_data, weight_data, b, c2


def gaussian_posterior_denoiser(prior: GaussianPrior, problem: BridgeProblem, x, t):
    """Exact E[x_0 | x_t, x_T] for a diagonal Gaussian prior."""
    params = problem.schedule
    t = float(t)
    if not (params.t_min <= t <= problem.T):
        raise DomainError(f"gaussian_posterior_denoiser: t={t!r} outside [t_min, T]")
    x = np.asarray(x, dtype=float)
    a, prec_data, weight_data, _, _ = _posterior_terms(params, t, problem.T)
    prec = 1.0 / prior.var + prec_data
    num = prior.mean / prior.var + weight_data * (x - a * problem.x_T)
    return num / prec


def gmm_posterior_denoiser(prior: GmmPrior, problem: BridgeProblem, x, t):
    """Exact E[x_0 | x_t, x_T] for a diagonal-Gaussian mixture prior.

    Responsibilities are computed in log space; components whose
    responsibility underflows below 1e-300 are dropped and the rest
    renormalized.
    """
    params = problem.schedule
    t = float(t)
    if not (params.t_min <= t <= problem.T):
        raise DomainError(f"gmm_posterior_denoiser: t={t!r} outside [t_min, T]")
    x = np.asarray(x, dtype=float)
    a, prec_data, weight_data, b, c2 = _posterior_terms(params, t, problem.T)

    centered = x - a * problem.x_T        # (..., d)
    k = prior.n_components
    if t == problem.T:
        # x == x_T carries no information at the pinned endpoint
        log_resp = np.broadcast_to(np.log(prior.weights),
                                   x.shape[:-1] + (k,)).copy()
    else:
        log_resp = np.empty(x.shape[:-1] + (k,))
        for j in range(k):
            var_like = b * b * prior.vars[j] + c2
            r = x - (a * problem.x_T + b * prior.means[j])
            log_resp[..., j] = (math.log(prior.weights[j])
                                - 0.5 * np.sum(r * r / var_like + np.log(var_like),
                                               axis=-1))
    log_resp -= np.max(log_resp, axis=-1, keepdims=True)
    resp = np.exp(log_resp)
    resp[resp < 1e-300] = 0.0
    resp /= np.sum(resp, axis=-1, keepdims=True)

    out = np.zeros_like(x)
    for j in range(k):
        prec = 1.0 / prior.vars[j] + prec_data
        mean_j = (prior.means[j] / prior.vars[j] + weight_data * centered) / prec
        out += resp[..., j, None] * mean_j
    return out


class GaussianPosteriorDenoiser(Denoiser):
    """Counted denoiser wrapping ``gaussian_posterior_denoiser``."""

    def __init__(self, prior: GaussianPrior, schedule: ScheduleParams):
        super().__init__()
        self.prior = prior
        self.schedule = schedule

    def _evaluate(self, x, t, x_T, T):
        problem = BridgeProblem(schedule=self.schedule, x_T=x_T, T=T)
        return gaussian_posterior_denoiser(self.prior, problem, x, t)


class GmmPosteriorDenoiser(Denoiser):
    """Counted denoiser wrapping ``gmm_posterior_denoiser``."""

    def __init__(self, prior: GmmPrior, schedule: ScheduleParams):
        super().__init__()
        self.prior = prior
        self.schedule = schedule

    def _evaluate(self, x, t, x_T, T):
        problem = BridgeProblem(schedule=self.schedule, x_T=x_T, T=T)
        return gmm_posterior_denoiser(self.prior, problem, x, t)


class ConstantDenoiser(Denoiser):
    """Returns a fixed vector regardless of the input; an exactness probe
    for the closed-form ODE solution."""

    def __init__(self, value):
        super().__init__()
        self.value = np.atleast_1d(np.asarray(value, dtype=float))

    def _evaluate(self, x, t, x_T, T):
        return np.broadcast_to(self.value, x.shape)


class AffineLambdaDenoiser(Denoiser):
    """Returns c0 + c1 * lambda_t, ignoring x; exact under the 2nd-order
    integrator up to the midpoint secant, which is exact for affine maps."""

    def __init__(self, c0, c1, schedule: ScheduleParams):
        super().__init__()
        self.c0 = np.atleast_1d(np.asarray(c0, dtype=float))
        self.c1 = np.atleast_1d(np.asarray(c1, dtype=float))
        self.schedule = schedule

    def _evaluate(self, x, t, x_T, T):
        lam = half_log_snr(self.schedule, t)
        return np.broadcast_to(self.c0 + self.c1 * lam, x.shape)


def constant_denoiser(value) -> ConstantDenoiser:
    return ConstantDenoiser(value)


def affine_lambda_denoiser(c0, c1, schedule: ScheduleParams) -> AffineLambdaDenoiser:
    return AffineLambdaDenoiser(c0, c1, schedule)
