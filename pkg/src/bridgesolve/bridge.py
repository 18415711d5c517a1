"""Bridge-specific quantities: scores, right-hand sides, semi-linear split.

The reverse-time bridge SDE for a process pinned at (x_T, T) is

    dx = [f(x,t) - g(t)^2 s_cond(x,t) + g(t)^2 s_trans(x,t)] dt + g(t) dw,

and the matching probability-flow ODE replaces -g^2 s_cond with
-1/2 g^2 s_cond and drops the noise. Here s_cond is the score of the
tractable conditional p_t(x_t | x_T), expressed through the x0-predictor D,
and s_trans is the score of the transition p_t(x_T | x_t). Both scores are
affine in x with a scalar coefficient, which is what makes the ODE
semi-linear with a scalar linear part.

All state arrays have shape (..., d); the time axis is scalar per call.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, SingularityError
from .schedules import (
    ScheduleParams,
    alpha,
    diffusion_sq,
    drift_factor,
    half_log_snr,
    sigma,
)


@dataclass(frozen=True, eq=False)
class BridgeProblem:
    """Conditioning endpoint plus schedule; everything a step needs
    besides the current state.

    ``x_T`` may be a single vector (d,) or a batch (B, d); the trailing
    axis is the state dimension and is fixed for the run.
    """

    schedule: ScheduleParams
    x_T: np.ndarray
    T: float | None = None

    def __post_init__(self):
        x = np.asarray(self.x_T, dtype=float)
        if x.ndim == 0:
            x = x.reshape(1)
        if not np.all(np.isfinite(x)):
            raise ConfigError("endpoint x_T must be finite")
        object.__setattr__(self, "x_T", x)
        if self.T is None:
            object.__setattr__(self, "T", self.schedule.T)
        if float(self.T) != self.schedule.T:
            raise ConfigError("problem terminal time must equal the schedule's T")

    @property
    def dim(self) -> int:
        return self.x_T.shape[-1]


@dataclass
class State:
    """Current sample and its time."""

    x: np.ndarray
    t: float


class Denoiser:
    """x0-predictor interface D(x, t, x_T, T) with an evaluation counter.

    Every call increments ``nfe`` by exactly one unless counting is
    suspended (used by reference oracles so that benchmark NFEs stay
    honest). The counter is guarded by a lock; callers that share one
    denoiser across threads get consistent counts, everything else in the
    library is pure.
    """

    def __init__(self):
        self.nfe = 0
        self._counting = True
        self._lock = threading.Lock()

    def __call__(self, x, t, x_T, T):
        if self._counting:
            with self._lock:
                self.nfe += 1
        return self._evaluate(np.asarray(x, dtype=float), float(t),
                              np.asarray(x_T, dtype=float), float(T))

    def _evaluate(self, x, t, x_T, T):
        raise NotImplementedError

    @contextmanager
    def counting_disabled(self):
        """Suspend NFE accounting inside reference computations."""
        prev = self._counting
        self._counting = False
        try:
            yield self
        finally:
            self._counting = prev


def _check_time(problem: BridgeProblem, t: float) -> float:
    t = float(t)
    params = problem.schedule
    if t == problem.T:
        raise SingularityError(
            "bridge scores are singular at t = T; route the initial step "
            "through the first-order SDE solution instead")
    if not (params.t_min <= t < problem.T):
        raise DomainError(f"t={t!r} outside [t_min, T)")
    return t


def _score_pieces(problem: BridgeProblem, t: float):
    """Shared scalar coefficients of both scores at time t.

    Returns (a_t alpha-ratio term, one_minus = 1 - SNR_T/SNR_t,
    conditional denominator, transition denominator, alpha_t).
    """
    params = problem.schedule
    lam_t = half_log_snr(params, t)
    lam_T = half_log_snr(params, problem.T)
    a_t = alpha(params, t)
    a_T = alpha(params, problem.T)
    sig2 = sigma(params, t) ** 2
    one_minus = -math.expm1(-2.0 * (lam_t - lam_T))     # 1 - SNR_T/SNR_t
    rho_tT = math.expm1(2.0 * (lam_t - lam_T))          # SNR_t/SNR_T - 1
    snr_ratio = math.exp(2.0 * (lam_T - lam_t))         # SNR_T/SNR_t
    return a_t, a_T, sig2, one_minus, rho_tT, snr_ratio


def score_from_x0(problem: BridgeProblem, x, t, d_out):
    """Score of p_t(x | x_T) expressed through the x0-prediction ``d_out``."""
    t = _check_time(problem, t)
    x = np.asarray(x, dtype=float)
    d_out = np.asarray(d_out, dtype=float)
    a_t, a_T, sig2, one_minus, _, snr_ratio = _score_pieces(problem, t)
    num = (snr_ratio * (a_t / a_T)) * problem.x_T + (a_t * one_minus) * d_out - x
    return num / (sig2 * one_minus)


def transition_score(problem: BridgeProblem, x, t):
    """Score of the tractable transition p_t(x_T | x), a Gaussian pull
    toward (alpha_t / alpha_T) x_T."""
    t = _check_time(problem, t)
    x = np.asarray(x, dtype=float)
    a_t, a_T, sig2, _, rho_tT, _ = _score_pieces(problem, t)
    return ((a_t / a_T) * problem.x_T - x) / (sig2 * rho_tT)


def _rhs_both(problem: BridgeProblem, x, t, d_out):
    """Deterministic SDE drift and PF-ODE right-hand side in one pass."""
    t = _check_time(problem, t)
    x = np.asarray(x, dtype=float)
    params = problem.schedule
    a_t, a_T, sig2, one_minus, rho_tT, snr_ratio = _score_pieces(problem, t)
    s_cond = ((snr_ratio * (a_t / a_T)) * problem.x_T
              + (a_t * one_minus) * np.asarray(d_out, dtype=float)
              - x) / (sig2 * one_minus)
    s_trans = ((a_t / a_T) * problem.x_T - x) / (sig2 * rho_tT)
    fx = drift_factor(params, t) * x
    g2 = diffusion_sq(params, t)
    ode = fx - 0.5 * g2 * s_cond + g2 * s_trans
    sde = fx - g2 * s_cond + g2 * s_trans
    return sde, ode


def pf_ode_rhs(problem: BridgeProblem, x, t, denoiser: Denoiser):
    """Right-hand side of the bridge probability-flow ODE; costs one
    denoiser evaluation."""
    d_out = denoiser(x, t, problem.x_T, problem.T)
    return _rhs_both(problem, x, t, d_out)[1]


def sde_rhs_deterministic(problem: BridgeProblem, x, t, denoiser: Denoiser):
    """dt-part of the reverse bridge SDE; the diffusion magnitude g(t) is
    reported separately by ``schedules.diffusion_sq``."""
    d_out = denoiser(x, t, problem.x_T, problem.T)
    return _rhs_both(problem, x, t, d_out)[0]


def semilinear_split(problem: BridgeProblem, t):
    """Split the PF-ODE right-hand side as L(t) x + N(d_out, t, x_T).

    L is a scalar because both scores are isotropic in x. Returns
    ``(L, n_builder)`` where ``n_builder(d_out)`` assembles the non-linear
    term for a given x0-prediction.
    """
    t = _check_time(problem, t)
    params = problem.schedule
    a_t, a_T, sig2, one_minus, rho_tT, snr_ratio = _score_pieces(problem, t)
    g2 = diffusion_sq(params, t)
    lin = (drift_factor(params, t)
           + 0.5 * g2 / (sig2 * one_minus)
           - g2 / (sig2 * rho_tT))
    x_T = problem.x_T

    def n_builder(d_out):
        d_out = np.asarray(d_out, dtype=float)
        cond_num = (snr_ratio * (a_t / a_T)) * x_T + (a_t * one_minus) * d_out
        trans_num = (a_t / a_T) * x_T
        return (-0.5 * g2 / (sig2 * one_minus)) * cond_num \
            + (g2 / (sig2 * rho_tT)) * trans_num

    return lin, n_builder
