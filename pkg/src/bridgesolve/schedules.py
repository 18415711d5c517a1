"""Noise schedules and the log-SNR calculus for diffusion bridges.

A schedule defines the forward marginal x_t | x_0 ~ N(alpha_t x_0, sigma_t^2 I)
through the pair (alpha_t, sigma_t) for t in (0, T]. Two families are supported:

* VE (variance exploding): alpha_t = 1, sigma_t = scale * t
* VP (variance preserving): alpha_t = exp(-1/4 t^2 (bmax - bmin) - 1/2 t bmin),
  sigma_t = sqrt(1 - alpha_t^2), i.e. a linear beta(t) = bmin + t (bmax - bmin)

Everything downstream is written in terms of the half log-SNR
lambda_t = log(alpha_t / sigma_t), which is strictly decreasing in t, and of
rho(a, b) = exp(2 (a - b)) - 1, the SNR ratio minus one between two lambdas.

Both lambda and SNR diverge at t = 0, so schedule quantities are only
evaluated at or above ``t_min``; time grids still end at t_0 = 0, which is
reached by a final Euler step that evaluates nothing below t_1 >= t_min.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError

VE = "ve"
VP = "vp"

UNIFORM_T = "uniform_t"
UNIFORM_LAMBDA = "uniform_lambda"

_KINDS = (VE, VP)
_SCHEMES = (UNIFORM_T, UNIFORM_LAMBDA)


@dataclass(frozen=True)
class ScheduleParams:
    """Parameters of a VE or VP bridge noise schedule.

    ``t_min`` defaults to 1e-4 * T; it is the smallest time at which any
    log-SNR quantity is evaluated.
    """

    kind: str
    T: float = 1.0
    t_min: float | None = None
    ve_sigma_scale: float = 1.0
    vp_beta_min: float = 0.1
    vp_beta_max: float = 20.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ConfigError("terminal time T must be positive and finite")
        if self.t_min is None:
            object.__setattr__(self, "t_min", 1e-4 * self.T)
        if not (0.0 < self.t_min < self.T):
            raise ConfigError("t_min must lie strictly inside (0, T)")
        if self.kind == VE and self.ve_sigma_scale <= 0:
            raise ConfigError("ve_sigma_scale must be positive")
        if self.kind == VP and (self.vp_beta_min <= 0 or self.vp_beta_max <= 0):
            raise ConfigError("vp beta parameters must be positive")

    @classmethod
    def ve(cls, scale: float = 1.0, T: float = 1.0, t_min: float | None = None):
        return cls(kind=VE, T=T, t_min=t_min, ve_sigma_scale=scale)

    @classmethod
    def vp(cls, beta_min: float = 0.1, beta_max: float = 20.0, T: float = 1.0,
           t_min: float | None = None):
        return cls(kind=VP, T=T, t_min=t_min, vp_beta_min=beta_min,
                   vp_beta_max=beta_max)


@dataclass(frozen=True)
class TimeGrid:
    """Descending sampling times t_N > ... > t_1 > t_0 = 0."""

    times: tuple = field(default_factory=tuple)
    scheme: str = UNIFORM_T

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", ts)
        if self.scheme not in _SCHEMES:
            raise ConfigError(f"unknown grid scheme {self.scheme!r}")
        if len(ts) < 4:
            raise ConfigError("grid needs at least 3 steps (4 time points)")
        if ts[-1] != 0.0:
            raise ConfigError("grid must end at t_0 = 0")
        if any(a <= b for a, b in zip(ts, ts[1:])):
            raise ConfigError("grid times must be strictly descending")

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def T(self) -> float:
        return self.times[0]


def _check_range(t: float, lo: float, hi: float, what: str) -> float:
    t = float(t)
    if not (lo <= t <= hi) or not math.isfinite(t):
        raise DomainError(f"{what}: t={t!r} outside [{lo!r}, {hi!r}]")
    return t


def _vp_log_alpha(params: ScheduleParams, t: float) -> float:
    return (-0.25 * t * t * (params.vp_beta_max - params.vp_beta_min)
            - 0.5 * t * params.vp_beta_min)


def alpha(params: ScheduleParams, t) -> float:
    """Signal coefficient alpha_t. VE is identically 1."""
    t = _check_range(t, 0.0, params.T, "alpha")
    if params.kind == VE:
        return 1.0
    return math.exp(_vp_log_alpha(params, t))


def sigma(params: ScheduleParams, t) -> float:
    """Noise coefficient sigma_t; undefined at t <= 0 (sigma_0 = 0 makes
    the log-SNR diverge)."""
    t = float(t)
    if not (0.0 < t <= params.T):
        raise DomainError(f"sigma: t={t!r} outside (0, T]")
    if params.kind == VE:
        return params.ve_sigma_scale * t
    # sigma^2 = 1 - alpha^2 = -expm1(2 log alpha), stable for small t
    return math.sqrt(-math.expm1(2.0 * _vp_log_alpha(params, t)))


def half_log_snr(params: ScheduleParams, t) -> float:
    """lambda_t = log(alpha_t / sigma_t), strictly decreasing in t."""
    t = _check_range(t, params.t_min, params.T, "half_log_snr")
    if params.kind == VE:
        return -math.log(params.ve_sigma_scale * t)
    la = _vp_log_alpha(params, t)
    return la - 0.5 * math.log(-math.expm1(2.0 * la))


def snr(params: ScheduleParams, t) -> float:
    """Signal-to-noise ratio alpha_t^2 / sigma_t^2."""
    a = alpha(params, t)
    s = sigma(params, t)
    return (a * a) / (s * s)


def t_of_lambda(params: ScheduleParams, lam) -> float:
    """Inverse of ``half_log_snr``.

    Closed form for VE; monotone bisection for VP (guaranteed convergence,
    200 iterations max).
    """
    lam = float(lam)
    lam_lo = half_log_snr(params, params.T)
    lam_hi = half_log_snr(params, params.t_min)
    # tiny slack so that lambda values computed from grid endpoints round-trip
    eps = 1e-12 * max(1.0, abs(lam_lo), abs(lam_hi))
    if not (lam_lo - eps <= lam <= lam_hi + eps):
        raise DomainError(f"t_of_lambda: lam={lam!r} outside [{lam_lo!r}, {lam_hi!r}]")
    lam = min(max(lam, lam_lo), lam_hi)
    if params.kind == VE:
        return math.exp(-lam) / params.ve_sigma_scale
    lo, hi = params.t_min, params.T  # lambda(lo) = lam_hi >= lam >= lam_lo = lambda(hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lmid = half_log_snr(params, mid)
        if abs(lmid - lam) <= 1e-13:
            return mid
        if lmid > lam:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-16 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def t_of_lambda_array(params: ScheduleParams, lams: np.ndarray) -> np.ndarray:
    """Vectorized ``t_of_lambda`` for grid construction and fine references."""
    lams = np.asarray(lams, dtype=float)
    lam_lo = half_log_snr(params, params.T)
    lam_hi = half_log_snr(params, params.t_min)
    eps = 1e-12 * max(1.0, abs(lam_lo), abs(lam_hi))
    if np.any(lams < lam_lo - eps) or np.any(lams > lam_hi + eps):
        raise DomainError("t_of_lambda_array: lambda values outside schedule range")
    lams = np.clip(lams, lam_lo, lam_hi)
    if params.kind == VE:
        return np.exp(-lams) / params.ve_sigma_scale
    lo = np.full_like(lams, params.t_min)
    hi = np.full_like(lams, params.T)
    bmin, bmax = params.vp_beta_min, params.vp_beta_max
    for _ in range(90):
        mid = 0.5 * (lo + hi)
        la = -0.25 * mid * mid * (bmax - bmin) - 0.5 * mid * bmin
        lmid = la - 0.5 * np.log(-np.expm1(2.0 * la))
        above = lmid > lams
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    return 0.5 * (lo + hi)


def rho(a, b) -> float:
    """rho(a, b) = exp(2 (a - b)) - 1, via expm1 to avoid cancellation."""
    a, b = float(a), float(b)
    if a < b:
        raise DomainError(f"rho: a={a!r} < b={b!r} would be negative")
    return math.expm1(2.0 * (a - b))


def drift_factor(params: ScheduleParams, t) -> float:
    """Coefficient of x in the linear drift f(x, t) = drift_factor(t) x,
    equal to d(log alpha_t)/dt."""
    t = _check_range(t, 0.0, params.T, "drift_factor")
    if params.kind == VE:
        return 0.0
    return -0.5 * (params.vp_beta_min + t * (params.vp_beta_max - params.vp_beta_min))


def diffusion_sq(params: ScheduleParams, t) -> float:
    """Squared diffusion coefficient g(t)^2, the unique choice consistent
    with the marginal N(alpha_t x_0, sigma_t^2 I):
    g^2 = d(sigma^2)/dt - 2 drift_factor sigma^2."""
    t = _check_range(t, 0.0, params.T, "diffusion_sq")
    if params.kind == VE:
        return 2.0 * params.ve_sigma_scale ** 2 * t
    return params.vp_beta_min + t * (params.vp_beta_max - params.vp_beta_min)


def make_grid(params: ScheduleParams, n_steps: int, scheme: str = UNIFORM_T) -> TimeGrid:
    """Build a descending sampling grid with ``n_steps`` steps.

    ``uniform_t`` spaces t_1 .. t_N evenly on [t_min, T]; ``uniform_lambda``
    spaces them evenly in half log-SNR. Both end with t_0 = 0.
    """
    if scheme not in _SCHEMES:
        raise ConfigError(f"unknown grid scheme {scheme!r}")
    n = int(n_steps)
    if n < 3:
        raise ConfigError("n_steps must be at least 3 "
                          "(initial SDE step, one ODE step, final Euler step)")
    if scheme == UNIFORM_T:
        ts = np.linspace(params.T, params.t_min, n)
    else:
        lam_desc = np.linspace(half_log_snr(params, params.T),
                               half_log_snr(params, params.t_min), n)
        ts = t_of_lambda_array(params, lam_desc)
    ts[0] = params.T
    ts[-1] = params.t_min
    return TimeGrid(times=tuple(ts) + (0.0,), scheme=scheme)
