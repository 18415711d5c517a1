"""Verification oracles and measurements.

Everything here sits on the other side of a dual-route check from the
solver formulas: adaptive quadrature validates the closed-form exponential
integrals, fine-step reference integrators validate individual solver
steps, convergence studies fit observed orders, and sliced Wasserstein
distance scores sample quality at desk scale. Denoiser evaluations made by
reference integrators are excluded from NFE counters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bridge import BridgeProblem, Denoiser, pf_ode_rhs
from .errors import ConfigError, DomainError, OracleError, OrderingError
from .schedules import (
    diffusion_sq,
    drift_factor,
    half_log_snr,
    t_of_lambda_array,
)
from .solvers import (
    NOISE_AUX,
    heun_step,
    noise_stream,
    ode_step_k1,
    ode_step_k2,
    sde_step_from_noise,
)

SLICED_WASSERSTEIN = "sliced_wasserstein"
ENERGY_DISTANCE = "energy_distance"


@dataclass
class ConvergenceReport:
    """Endpoint errors of a deterministic phase against a fine reference,
    with a least-squares order fit."""

    solver: str
    step_counts: list
    errors: list
    fitted_slope: float
    r_squared: float
    exact: bool = False

    def to_json_dict(self):
        return {
            "solver": self.solver,
            "step_counts": [int(n) for n in self.step_counts],
            "errors": [float(e) for e in self.errors],
            "fitted_slope": float(self.fitted_slope),
            "r_squared": float(self.r_squared),
            "exact": bool(self.exact),
        }


@dataclass
class MetricReport:
    metric: str
    value: float
    n_samples: int
    n_projections: int
    seed: int


# ---------------------------------------------------------------------------
# adaptive quadrature

def integrate_adaptive_simpson(f, a: float, b: float, tol: float,
                               max_depth: int = 60) -> float:
    """Adaptive Simpson quadrature to absolute tolerance ``tol``.

    Raises OracleError if any subinterval still misses its share of the
    tolerance at the maximum refinement depth.
    """
    if a == b:
        return 0.0
    if tol <= 0:
        raise ConfigError("tolerance must be positive")

    def simpson(fa, fm, fb, h):
        return h / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(x0, x2, f0, f2, whole, tol, depth):
        x1 = 0.5 * (x0 + x2)
        lm, rm = 0.5 * (x0 + x1), 0.5 * (x1 + x2)
        f1 = f(x1)
        flm, frm = f(lm), f(rm)
        left = simpson(f0, flm, f1, x1 - x0)
        right = simpson(f1, frm, f2, x2 - x1)
        err = (left + right - whole) / 15.0
        if abs(err) <= tol:
            return left + right + err
        if depth >= max_depth:
            raise OracleError("adaptive Simpson failed to converge "
                              f"on [{x0}, {x2}] at depth {depth}")
        return (recurse(x0, x1, f0, f1, left, tol / 2.0, depth + 1)
                + recurse(x1, x2, f1, f2, right, tol / 2.0, depth + 1))

    fa, fb = f(a), f(b)
    fm = f(0.5 * (a + b))
    whole = simpson(fa, fm, fb, b - a)
    return recurse(a, b, fa, fb, whole, tol, 0)


def quadrature_oracle(n: int, lam_s, lam_t, lam_T, tol: float = 1e-10) -> float:
    """Independent evaluation of the exponential integral by adaptive
    Simpson on e^{2l} (l - lam_s)^n / (n! sqrt(rho(l, lam_T)))."""
    lam_s, lam_t, lam_T = float(lam_s), float(lam_t), float(lam_T)
    if n < 0 or int(n) != n:
        raise ConfigError("order n must be a non-negative integer")
    if lam_s <= lam_T:
        raise OrderingError("quadrature_oracle needs lam_T < lam_s so that the "
                            "sqrt singularity stays outside the range")
    if lam_t < lam_s:
        raise OrderingError(f"quadrature needs lam_s <= lam_t, got {lam_s} > {lam_t}")
    if lam_t == lam_s:
        return 0.0
    fact = math.factorial(int(n))

    def f(lam):
        return (math.exp(2.0 * lam) * (lam - lam_s) ** n
                / (fact * math.sqrt(math.expm1(2.0 * (lam - lam_T)))))

    return integrate_adaptive_simpson(f, lam_s, lam_t, tol)


# ---------------------------------------------------------------------------
# fine-step reference integrators

def fine_reference_ode(problem: BridgeProblem, x_s, s, t, denoiser: Denoiser,
                       substeps: int) -> np.ndarray:
    """Classical 4th-order one-step integration of the PF ODE on a
    lambda-uniform subgrid; denoiser evaluations are not counted."""
    s, t = float(s), float(t)
    if t > s:
        raise OrderingError(f"reference needs t <= s, got t={t!r} > s={s!r}")
    if s >= problem.T:
        raise DomainError("reference cannot start at or beyond s = T")
    x = np.array(x_s, dtype=float)
    if t == s:
        return x
    params = problem.schedule
    lams = np.linspace(half_log_snr(params, s), half_log_snr(params, t),
                       int(substeps) + 1)
    ts = t_of_lambda_array(params, lams)
    ts[0], ts[-1] = s, t
    with denoiser.counting_disabled():
        for i in range(len(ts) - 1):
            t0, t1 = ts[i], ts[i + 1]
            h = t1 - t0
            tm = 0.5 * (t0 + t1)
            k1 = pf_ode_rhs(problem, x, t0, denoiser)
            k2 = pf_ode_rhs(problem, x + 0.5 * h * k1, tm, denoiser)
            k3 = pf_ode_rhs(problem, x + 0.5 * h * k2, tm, denoiser)
            k4 = pf_ode_rhs(problem, x + h * k3, t1, denoiser)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def fine_reference_sde(problem: BridgeProblem, x_s, s, t, denoiser: Denoiser,
                       substeps: int, noise_path: np.ndarray) -> np.ndarray:
    """Euler-Maruyama on a uniform-in-t subgrid with a supplied Brownian
    increment path (``noise_path[i]`` has variance |dt| per component), so
    coarse solvers can be compared pathwise by coarsening the same path."""
    s, t = float(s), float(t)
    if t >= s:
        raise OrderingError(f"reference needs t < s, got {t!r} >= {s!r}")
    substeps = int(substeps)
    noise_path = np.asarray(noise_path, dtype=float)
    if noise_path.shape[0] != substeps:
        raise ConfigError("noise_path must have one increment per substep")
    from .bridge import _rhs_both
    params = problem.schedule
    ts = np.linspace(s, t, substeps + 1)
    x = np.array(x_s, dtype=float)
    with denoiser.counting_disabled():
        for i in range(substeps):
            t0, t1 = ts[i], ts[i + 1]
            d_out = denoiser(x, t0, problem.x_T, problem.T)
            drift = _rhs_both(problem, x, t0, d_out)[0]
            g = math.sqrt(diffusion_sq(params, t0))
            x = x + (t1 - t0) * drift + g * noise_path[i]
    return x


# ---------------------------------------------------------------------------
# batched Euler-Maruyama reference sampler

def em_reference_step_tables(problem: BridgeProblem, times):
    """Per-step scalar coefficients of the batched reference sampler.

    The Euler-Maruyama update on the bridge SDE drift is affine in
    (x, x_T, D, z), so each step reduces to four scalars

        x <- coef_x x + coef_xT x_T + coef_d D(x) + coef_z z.

    The grouping is an algebraic rearrangement of the same score assembly
    used by the per-trajectory samplers; precomputing it keeps the
    1e5-step loop at a handful of vectorized array operations per step.
    """
    params = problem.schedule
    T = problem.T
    lam_T = half_log_snr(params, T)
    n = len(times) - 1
    tab = {
        "coef_x": np.empty(n), "coef_xT": np.empty(n), "coef_d": np.empty(n),
        "coef_z": np.empty(n),
        "prec_data": np.empty(n), "weight_data": np.empty(n),
        "a_marg": np.empty(n), "b_marg": np.empty(n), "c2_marg": np.empty(n),
    }
    from .schedules import alpha as _alpha, sigma as _sigma
    a_T = _alpha(params, T)
    for i in range(n):
        s = times[i]
        lam = half_log_snr(params, s)
        a_t = _alpha(params, s)
        sig2 = _sigma(params, s) ** 2
        one_minus = -math.expm1(-2.0 * (lam - lam_T))
        rho_tT = math.expm1(2.0 * (lam - lam_T))
        dt = times[i + 1] - s
        g2 = diffusion_sq(params, s)
        if i == 0:
            # s = T: score denominators vanish; the initial step goes
            # through the SDE solution and never reads these entries
            tab["coef_x"][i] = tab["coef_xT"][i] = math.nan
            tab["coef_d"][i] = tab["coef_z"][i] = math.nan
        else:
            inv_cond = 1.0 / (sig2 * one_minus)
            inv_trans = 1.0 / (sig2 * rho_tT)
            a_ratio = a_t / a_T
            snr_ratio = math.exp(2.0 * (lam_T - lam))
            drift_x = drift_factor(params, s) + g2 * inv_cond - g2 * inv_trans
            drift_xT = g2 * a_ratio * (inv_trans - inv_cond * snr_ratio)
            drift_d = -g2 * inv_cond * a_t * one_minus
            tab["coef_x"][i] = 1.0 + dt * drift_x
            tab["coef_xT"][i] = dt * drift_xT
            tab["coef_d"][i] = dt * drift_d
            tab["coef_z"][i] = math.sqrt(g2) * math.sqrt(s - times[i + 1])
        tab["prec_data"][i] = math.exp(2.0 * lam) - math.exp(2.0 * lam_T)
        tab["weight_data"][i] = a_t / sig2
        tab["a_marg"][i] = math.exp(2.0 * (lam_T - lam)) * (a_t / a_T)
        tab["b_marg"][i] = a_t * one_minus
        tab["c2_marg"][i] = sig2 * one_minus
    return tab


def _fast_posterior_into(denoiser, tab, xt_T, B, d):
    """Buffered posterior-mean evaluator for the reference loop, or None.

    Works in transposed (d, B) layout so every array operation is either
    contiguous or an outer-axis reduction, and the quadratic forms and the
    responsibility-weighted mixture mean become small matmuls. Reuses the
    same per-step scalar terms as the models module.
    """
    from .models import GaussianPosteriorDenoiser, GmmPosteriorDenoiser
    if isinstance(denoiser, GaussianPosteriorDenoiser):
        mean = denoiser.prior.mean[:, None]    # (d, 1)
        var = denoiser.prior.var[:, None]
        base = mean / var

        def fn(i, xt, out):
            prec = 1.0 / var + tab["prec_data"][i]
            np.multiply(xt_T, tab["a_marg"][i], out=out)
            np.subtract(xt, out, out=out)
            np.multiply(out, tab["weight_data"][i], out=out)
            np.add(out, base, out=out)
            np.divide(out, prec, out=out)
            return out

        return fn
    if isinstance(denoiser, GmmPosteriorDenoiser):
        prior = denoiser.prior
        k_comp = prior.n_components
        logw = np.log(prior.weights)
        mu = prior.means                       # (K, d)
        vv = prior.vars                        # (K, d)
        centered = np.empty((d, B))
        c2buf = np.empty((d, B))
        lr = np.empty((k_comp, B))
        lr2 = np.empty((k_comp, B))
        mx = np.empty(B)
        zsum = np.empty(B)
        tmp = np.empty((d, B))

        def fn(i, xt, out):
            a, b, c2 = tab["a_marg"][i], tab["b_marg"][i], tab["c2_marg"][i]
            prec_data, wd = tab["prec_data"][i], tab["weight_data"][i]
            var_like = b * b * vv + c2                      # (K, d)
            # log responsibilities as an affine map of (centered^2, centered)
            quad = -0.5 / var_like                          # (K, d)
            lin = b * mu / var_like                         # (K, d)
            const = (logw - 0.5 * np.sum(np.log(var_like), axis=1)
                     - 0.5 * b * b * np.sum(mu * mu / var_like, axis=1))
            np.multiply(xt_T, a, out=centered)
            np.subtract(xt, centered, out=centered)
            np.multiply(centered, centered, out=c2buf)
            np.matmul(quad, c2buf, out=lr)
            np.matmul(lin, centered, out=lr2)
            np.add(lr, lr2, out=lr)
            np.add(lr, const[:, None], out=lr)
            # component-wise softmax
            np.max(lr, axis=0, out=mx)
            np.subtract(lr, mx, out=lr)
            np.exp(lr, out=lr)
            np.sum(lr, axis=0, out=zsum)
            np.divide(lr, zsum, out=lr)
            # posterior mean of component k is base_k + gain_k * centered;
            # the responsibility-weighted mix is two small matmuls
            prec = 1.0 / vv + prec_data                     # (K, d)
            base = ((mu / vv) / prec).T                     # (d, K)
            gain = (wd / prec).T                            # (d, K)
            np.matmul(base, lr, out=out)
            np.matmul(gain, lr, out=tmp)
            np.multiply(tmp, centered, out=tmp)
            out += tmp
            return out

        return fn
    return None


def em_reference_batch(problem: BridgeProblem, denoiser: Denoiser, n_steps: int,
                       seed: int, noise_fn=None) -> np.ndarray:
    """Ground-truth sampler: Euler-Maruyama over a uniform grid with
    ``n_steps`` steps, the initial step from T taken via the first-order
    SDE solution as everywhere else.

    Oracle-mode: denoiser evaluations are uncounted, and by default the
    noise comes from a single fast auxiliary stream rather than
    per-trajectory keying, which keeps 1e5-step runs tractable. Pass
    ``noise_fn`` to supply noise explicitly (used by tests to cross-check
    against the per-trajectory sampler).
    """
    from .schedules import make_grid
    params = problem.schedule
    grid = make_grid(params, int(n_steps))
    times = grid.times
    x = np.array(np.atleast_2d(problem.x_T), dtype=float)
    B, d = x.shape
    tab = em_reference_step_tables(problem, times)
    x_T = np.atleast_2d(problem.x_T)

    external_noise = noise_fn is not None
    if not external_noise:
        rng = np.random.Generator(np.random.SFC64(np.random.SeedSequence(
            [int(seed) & ((1 << 64) - 1), 0x5EED])))

    # transposed (d, B) layout keeps every loop operation contiguous
    xt_T = np.ascontiguousarray(x_T.T)
    fast_post = _fast_posterior_into(denoiser, tab, xt_T, B, d)
    dout = np.empty((d, B))
    tmp = np.empty((d, B))
    zbuf = np.empty((d, B))

    with denoiser.counting_disabled():
        # initial first-order SDE step from T to t_{N-1}; the denoiser is
        # evaluated at t = T through the generic path
        d0 = denoiser(x, times[0], x_T, problem.T)
        z0 = noise_fn(0, x.shape) if external_noise else rng.standard_normal(x.shape)
        x = np.array(sde_step_from_noise(problem, x, times[0], times[1], d0, z0))
        xt = np.ascontiguousarray(x.T)

        for i in range(1, len(times) - 1):
            if fast_post is not None:
                fast_post(i, xt, dout)
            else:
                dout[...] = denoiser(xt.T, times[i], x_T, problem.T).T
            if external_noise:
                zbuf[...] = noise_fn(i, (B, d)).T
            else:
                rng.standard_normal(out=zbuf)
            # x <- coef_x x + coef_xT x_T + coef_d D + coef_z z
            xt *= tab["coef_x"][i]
            np.multiply(xt_T, tab["coef_xT"][i], out=tmp)
            xt += tmp
            np.multiply(dout, tab["coef_d"][i], out=tmp)
            xt += tmp
            zbuf *= tab["coef_z"][i]
            xt += zbuf
    return np.ascontiguousarray(xt.T)


# ---------------------------------------------------------------------------
# convergence studies

_STUDY_SOLVERS = ("ode_k1", "ode_k2", "heun")

# default start of the deterministic phase, in half-log-SNR distance above
# lambda_T: far enough from the rho -> 0 endpoint singularity that local
# truncation errors are in their asymptotic regime at N >= 8
_STUDY_LAMBDA_OFFSET = 0.5


def _default_study_start(problem: BridgeProblem) -> float:
    from .schedules import t_of_lambda
    params = problem.schedule
    lam_T = half_log_snr(params, problem.T)
    lam_min = half_log_snr(params, params.t_min)
    target = lam_T + _STUDY_LAMBDA_OFFSET
    if target >= lam_min:
        return problem.T - 0.05 * (problem.T - params.t_min)
    return t_of_lambda(params, target)


def _deterministic_phase(problem, solver, x_start, ts, denoiser, r):
    x = np.array(x_start, dtype=float)
    for i in range(len(ts) - 1):
        s, t = ts[i], ts[i + 1]
        if solver == "ode_k1":
            x = ode_step_k1(problem, x, s, t, denoiser)
        elif solver == "ode_k2":
            x = ode_step_k2(problem, x, s, t, denoiser, r=r)
        elif solver == "heun":
            x = heun_step(problem, x, s, t, denoiser)
        else:
            raise ConfigError(f"unknown study solver {solver!r}")
    return x


def convergence_study(problem: BridgeProblem, solver_kind: str, denoiser: Denoiser,
                      step_counts, *, start_time: float | None = None,
                      reference_substeps: int = 20000, midpoint_ratio: float = 0.5,
                      seed: int = 0, reference: np.ndarray | None = None,
                      x_start: np.ndarray | None = None) -> ConvergenceReport:
    """Fit the global order of a deterministic phase on [t_min, start_time].

    The starting state is one stochastic step from T with frozen noise
    (shared across all step counts), so only the deterministic phase's
    order is measured. Coarse runs use lambda-uniform substeps; the error
    is the endpoint L2 distance to a 4th-order fine reference.
    """
    step_counts = [int(n) for n in step_counts]
    if len(step_counts) < 4:
        raise ConfigError("need at least 4 step counts for a slope fit")
    if solver_kind not in _STUDY_SOLVERS:
        raise ConfigError(f"solver_kind must be one of {_STUDY_SOLVERS}")
    params = problem.schedule
    if start_time is None:
        start_time = _default_study_start(problem)
    t_end = params.t_min

    if x_start is None:
        z = noise_stream(int(seed), 0, NOISE_AUX, 0).standard_normal(problem.x_T.shape)
        with denoiser.counting_disabled():
            d_out = denoiser(problem.x_T, problem.T, problem.x_T, problem.T)
        x_start = sde_step_from_noise(problem, problem.x_T, problem.T,
                                      start_time, d_out, z)
    if reference is None:
        reference = fine_reference_ode(problem, x_start, start_time, t_end,
                                       denoiser, reference_substeps)

    lam_hi = half_log_snr(params, t_end)
    lam_lo = half_log_snr(params, start_time)
    errors = []
    with denoiser.counting_disabled():
        for n in step_counts:
            lam_grid = np.linspace(lam_lo, lam_hi, n + 1)
            ts = t_of_lambda_array(params, lam_grid)
            ts[0], ts[-1] = start_time, t_end
            x_n = _deterministic_phase(problem, solver_kind, x_start, ts,
                                       denoiser, midpoint_ratio)
            errors.append(float(np.linalg.norm(x_n - reference)))

    exact = max(errors) < 1e-12
    if exact:
        slope, r2 = float("nan"), float("nan")
    else:
        logn = np.log(np.asarray(step_counts, dtype=float))
        loge = np.log(np.maximum(np.asarray(errors), 1e-300))
        coeffs = np.polyfit(logn, loge, 1)
        slope = -float(coeffs[0])
        fit = np.polyval(coeffs, logn)
        ss_res = float(np.sum((loge - fit) ** 2))
        ss_tot = float(np.sum((loge - loge.mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ConvergenceReport(solver=solver_kind, step_counts=step_counts,
                             errors=errors, fitted_slope=slope, r_squared=r2,
                             exact=exact)


def shared_study_inputs(problem: BridgeProblem, denoiser: Denoiser, *,
                        start_time: float | None = None,
                        reference_substeps: int = 20000, seed: int = 0):
    """Starting state and fine reference shared across solver studies."""
    params = problem.schedule
    if start_time is None:
        start_time = _default_study_start(problem)
    z = noise_stream(int(seed), 0, NOISE_AUX, 0).standard_normal(problem.x_T.shape)
    with denoiser.counting_disabled():
        d_out = denoiser(problem.x_T, problem.T, problem.x_T, problem.T)
    x_start = sde_step_from_noise(problem, problem.x_T, problem.T, start_time,
                                  d_out, z)
    reference = fine_reference_ode(problem, x_start, start_time, params.t_min,
                                   denoiser, reference_substeps)
    return start_time, x_start, reference


# ---------------------------------------------------------------------------
# two-sample metrics

def sliced_wasserstein(a: np.ndarray, b: np.ndarray, n_projections: int = 128,
                       seed: int = 0, projections: np.ndarray | None = None
                       ) -> MetricReport:
    """Average 1D 2-Wasserstein distance over random unit projections
    (sorted-quantile form; sample sets must have equal size)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise ConfigError("sample sets must share shape (n, d)")
    n, d = a.shape
    if projections is None:
        rng = noise_stream(int(seed), 0, NOISE_AUX, 0)
        projections = rng.standard_normal((d, int(n_projections)))
        projections /= np.linalg.norm(projections, axis=0, keepdims=True)
    else:
        projections = np.asarray(projections, dtype=float)
    pa = np.sort(a @ projections, axis=0)
    pb = np.sort(b @ projections, axis=0)
    w2 = np.sqrt(np.mean((pa - pb) ** 2, axis=0))
    return MetricReport(metric=SLICED_WASSERSTEIN, value=float(np.mean(w2)),
                        n_samples=n, n_projections=projections.shape[1],
                        seed=int(seed))


def energy_distance(a: np.ndarray, b: np.ndarray, chunk: int = 1024) -> MetricReport:
    """Energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'| between sample sets."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ConfigError("sample sets must share the dimension")

    def mean_cross(u, v):
        total = 0.0
        for i in range(0, len(u), chunk):
            blk = u[i:i + chunk]
            total += float(np.sum(np.sqrt(
                np.sum((blk[:, None, :] - v[None, :, :]) ** 2, axis=-1))))
        return total / (len(u) * len(v))

    val = 2.0 * mean_cross(a, b) - mean_cross(a, a) - mean_cross(b, b)
    return MetricReport(metric=ENERGY_DISTANCE, value=max(float(val), 0.0),
                        n_samples=len(a), n_projections=0, seed=0)
