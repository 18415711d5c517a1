"""Bridge samplers: exponential-integrator steps plus baseline schemes.

The main sampler combines three phases over a descending grid
T = t_N > ... > t_1 > t_0 = 0:

1. one stochastic first-order step from t_N = T (the exact ODE solution's
   x_s coefficient diverges as s -> T, so the SDE solution is used there),
2. deterministic exponential-integrator steps of order k in {1, 2} down
   to t_1, each solving the linear part of the semi-linear PF ODE exactly
   and Taylor-expanding only the exponentially weighted integral of the
   denoiser,
3. a single Euler step from t_1 to 0.

Baselines: plain Euler-Maruyama over the whole grid, an alternating
SDE/Heun scheme, and an initial-SDE-then-Heun scheme. All samplers route
their first step from T through the first-order SDE solution, and any step
that would evaluate the PF ODE at t = 0 falls back to Euler.

Noise is drawn from a counter-based PRNG keyed by (seed, trajectory index,
step index), so batched runs reproduce single-trajectory runs bit for bit
and scheduling cannot change results.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .bridge import BridgeProblem, Denoiser, _rhs_both, pf_ode_rhs
from .errors import (
    ConfigError,
    DomainError,
    OrderingError,
    SingularityError,
    UnsupportedOrderError,
)
from .schedules import (
    TimeGrid,
    alpha,
    diffusion_sq,
    half_log_snr,
    rho,
    sigma,
    t_of_lambda,
)

DBMSOLVER = "dbmsolver"
EULER_MARUYAMA = "euler_maruyama"
HYBRID_HEUN = "hybrid_heun"
ODES3 = "odes3"
DBIM1 = "dbim1"

SOLVER_KINDS = (DBMSOLVER, EULER_MARUYAMA, HYBRID_HEUN, ODES3, DBIM1)

EPSILON_GRID = "grid"
EPSILON_FIXED = "fixed"

# purpose slot in the PRNG counter, keeping endpoint draws, step noise and
# auxiliary streams on disjoint counters
NOISE_ENDPOINT = 0
NOISE_STEP = 1
NOISE_AUX = 2

_MASK64 = (1 << 64) - 1


def noise_stream(seed: int, traj: int, purpose: int, step: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, trajectory, purpose, step)."""
    key = np.array([seed & _MASK64, traj & _MASK64], dtype=np.uint64)
    counter = np.array([0, 0, purpose, step], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def step_noise(seed: int, traj_indices, step: int, d: int) -> np.ndarray:
    """Stacked per-trajectory standard normals for one stochastic step."""
    rows = [noise_stream(seed, int(j), NOISE_STEP, step).standard_normal(d)
            for j in np.atleast_1d(traj_indices)]
    return np.stack(rows)


def endpoint_noise(seed: int, traj_indices, d: int) -> np.ndarray:
    rows = [noise_stream(seed, int(j), NOISE_ENDPOINT, 0).standard_normal(d)
            for j in np.atleast_1d(traj_indices)]
    return np.stack(rows)


# ---------------------------------------------------------------------------
# closed-form exponential integrals

def exp_integral(n: int, lam_s, lam_t, lam_T) -> float:
    """Closed form of int_{lam_s}^{lam_t} e^{2l} (l-lam_s)^n / (n! sqrt(rho(l, lam_T))) dl.

    Antiderivatives: substitution u = rho(l, lam_T) for n = 0; integration
    by parts plus v = sqrt(rho) for n = 1, giving

        e^{2 lam_T} [ (lam_t - lam_s) v_t - (v_t - v_s)
                      + (atan v_t - atan v_s) ].

    Both sqrt and atan differences are evaluated in difference form: the
    n = 1 result shrinks like (lam_t - lam_s)^2 while the naive terms stay
    O(1), so plain subtraction would cap the relative accuracy near 1e-8
    at spreads around 1e-4. Orders n >= 2 have no elementary
    antiderivative and raise.
    """
    if n not in (0, 1):
        raise UnsupportedOrderError(
            f"exp_integral order n={n} has a non-elementary antiderivative")
    lam_s, lam_t, lam_T = float(lam_s), float(lam_t), float(lam_T)
    if lam_s < lam_T:
        raise OrderingError(f"exp_integral needs lam_T <= lam_s, got {lam_T} > {lam_s}")
    if lam_t < lam_s:
        raise OrderingError(f"exp_integral needs lam_s <= lam_t, got {lam_s} > {lam_t}")
    if lam_t == lam_s:
        return 0.0
    rho_s = rho(lam_s, lam_T)
    rho_t = rho(lam_t, lam_T)
    v_s = math.sqrt(rho_s)
    v_t = math.sqrt(rho_t)
    scale = math.exp(2.0 * lam_T)
    dv = (rho_s + 1.0) * math.expm1(2.0 * (lam_t - lam_s)) / (v_t + v_s)
    if n == 0:
        return scale * dv
    datan = math.atan(dv / (1.0 + v_t * v_s))
    return scale * ((lam_t - lam_s) * v_t - dv + datan)


def ode_coeffs(problem: BridgeProblem, s, t):
    """Coefficients (C_s, C_T, C_int) of the exact PF-ODE solution

        x_t = C_s x_s + C_T x_T + C_int * int e^{2l} D(x_l) / sqrt(rho(l, lam_T)) dl.

    Singular at s = T, where rho(lam_s, lam_T) = 0 makes C_s diverge.
    """
    params = problem.schedule
    s, t = float(s), float(t)
    if s >= problem.T:
        if s == problem.T:
            raise SingularityError("ode_coeffs: the x_s coefficient diverges at s = T")
        raise DomainError(f"ode_coeffs: s={s!r} beyond T")
    if t > s:
        raise OrderingError(f"ode_coeffs needs t <= s, got t={t!r} > s={s!r}")
    if t < params.t_min:
        raise DomainError(f"ode_coeffs: t={t!r} below t_min")
    lam_s = half_log_snr(params, s)
    lam_t = half_log_snr(params, t)
    lam_T = half_log_snr(params, problem.T)
    a_s = alpha(params, s)
    a_t = alpha(params, t)
    a_T = alpha(params, problem.T)
    root = math.sqrt(rho(lam_t, lam_T) / rho(lam_s, lam_T))
    c_s = (a_t / a_s) * math.exp(2.0 * (lam_s - lam_t)) * root
    c_T = (a_t / a_T) * math.exp(2.0 * (lam_T - lam_t)) * (1.0 - root)
    c_int = a_t * math.exp(-2.0 * lam_t) * math.sqrt(rho(lam_t, lam_T))
    return c_s, c_T, c_int


# ---------------------------------------------------------------------------
# single steps

def _sde_coeffs(problem: BridgeProblem, s: float, t: float):
    params = problem.schedule
    lam_s = half_log_snr(params, s)
    lam_t = half_log_snr(params, t)
    a_s = alpha(params, s)
    a_t = alpha(params, t)
    ratio = math.exp(2.0 * (lam_s - lam_t))            # SNR_s / SNR_t <= 1
    one_minus = -math.expm1(-2.0 * (lam_t - lam_s))    # 1 - SNR_s/SNR_t
    coef_x = ratio * (a_t / a_s)
    coef_d = a_t * one_minus
    coef_z = sigma(params, t) * math.sqrt(one_minus)
    return coef_x, coef_d, coef_z


def sde_step_from_noise(problem: BridgeProblem, x_s, s, t, d_out, z):
    """First-order SDE update with an externally supplied normal draw."""
    s, t = float(s), float(t)
    if t > s:
        raise OrderingError(f"sde step needs t <= s, got t={t!r} > s={s!r}")
    if s > problem.T:
        raise DomainError(f"sde step: s={s!r} beyond T")
    if t < problem.schedule.t_min:
        raise DomainError(f"sde step: t={t!r} below t_min")
    coef_x, coef_d, coef_z = _sde_coeffs(problem, s, t)
    x_s = np.asarray(x_s, dtype=float)
    return coef_x * x_s + coef_d * np.asarray(d_out, dtype=float) \
        + coef_z * np.asarray(z, dtype=float)


def sde_step_order1(problem: BridgeProblem, x_s, s, t, denoiser: Denoiser,
                    rng: np.random.Generator):
    """First-order solution of the bridge SDE from s down to t.

        x_t = (SNR_s/SNR_t)(alpha_t/alpha_s) x_s
              + alpha_t (1 - SNR_s/SNR_t) D(x_s)
              + sigma_t sqrt(1 - SNR_s/SNR_t) z

    Exactly one denoiser evaluation; valid from s = T, where it is the
    only admissible step. At t = s it degenerates to the identity.
    """
    d_out = denoiser(x_s, s, problem.x_T, problem.T)
    z = rng.standard_normal(np.shape(np.asarray(x_s)))
    return sde_step_from_noise(problem, x_s, s, t, d_out, z)


def ode_step_k1(problem: BridgeProblem, x_s, s, t, denoiser: Denoiser):
    """First-order exponential-integrator ODE step (one evaluation)."""
    d_out = denoiser(x_s, s, problem.x_T, problem.T)
    c_s, c_T, c_int = ode_coeffs(problem, s, t)
    params = problem.schedule
    i0 = exp_integral(0,
                      half_log_snr(params, s),
                      half_log_snr(params, t),
                      half_log_snr(params, problem.T))
    return c_s * np.asarray(x_s, dtype=float) + c_T * problem.x_T \
        + (c_int * i0) * np.asarray(d_out, dtype=float)


def ode_step_k2(problem: BridgeProblem, x_s, s, t, denoiser: Denoiser,
                r: float = 0.5):
    """Second-order single-step (Markovian) exponential-integrator update.

    The denoiser's lambda-derivative is estimated by a midpoint secant: a
    first-order predictor lands at lam_u = lam_s + r (lam_t - lam_s), and

        D1 = (D(x_u) - D(x_s)) / (r (lam_t - lam_s))

    feeds the first-order term of the expansion. Exactly two evaluations.
    """
    if not (0.0 < r < 1.0):
        raise ConfigError(f"midpoint ratio must lie in (0, 1), got {r!r}")
    params = problem.schedule
    s, t = float(s), float(t)
    lam_s = half_log_snr(params, s)
    lam_t = half_log_snr(params, t)
    lam_T = half_log_snr(params, problem.T)
    x_s = np.asarray(x_s, dtype=float)

    d_s = denoiser(x_s, s, problem.x_T, problem.T)
    d_s = np.asarray(d_s, dtype=float)

    lam_u = lam_s + r * (lam_t - lam_s)
    t_u = t_of_lambda(params, lam_u)
    cu_s, cu_T, cu_int = ode_coeffs(problem, s, t_u)
    x_u = cu_s * x_s + cu_T * problem.x_T \
        + (cu_int * exp_integral(0, lam_s, lam_u, lam_T)) * d_s

    d_u = denoiser(x_u, t_u, problem.x_T, problem.T)
    d1 = (np.asarray(d_u, dtype=float) - d_s) / (r * (lam_t - lam_s))

    c_s, c_T, c_int = ode_coeffs(problem, s, t)
    i0 = exp_integral(0, lam_s, lam_t, lam_T)
    i1 = exp_integral(1, lam_s, lam_t, lam_T)
    return c_s * x_s + c_T * problem.x_T + c_int * (i0 * d_s + i1 * d1)


def final_euler_step(problem: BridgeProblem, x_1, t_1, denoiser: Denoiser):
    """Euler step from t_1 to 0 on the PF ODE; one evaluation, and the only
    step allowed to target t = 0 (nothing is evaluated below t_1)."""
    t_1 = float(t_1)
    return np.asarray(x_1, dtype=float) \
        + (0.0 - t_1) * pf_ode_rhs(problem, x_1, t_1, denoiser)


def em_step_from_noise(problem: BridgeProblem, x_s, s, t, d_out, z):
    """Euler-Maruyama update on the reverse bridge SDE, drift at the source."""
    s, t = float(s), float(t)
    if t >= s:
        raise OrderingError(f"em step needs t < s, got t={t!r} >= s={s!r}")
    drift = _rhs_both(problem, x_s, s, d_out)[0]
    g = math.sqrt(diffusion_sq(problem.schedule, s))
    return np.asarray(x_s, dtype=float) + (t - s) * drift \
        + g * math.sqrt(s - t) * np.asarray(z, dtype=float)


def heun_step(problem: BridgeProblem, x_s, s, t, denoiser: Denoiser):
    """Second-order Heun step on the PF ODE; two evaluations."""
    s, t = float(s), float(t)
    x_s = np.asarray(x_s, dtype=float)
    d1 = pf_ode_rhs(problem, x_s, s, denoiser)
    x_pred = x_s + (t - s) * d1
    d2 = pf_ode_rhs(problem, x_pred, t, denoiser)
    return x_s + 0.5 * (t - s) * (d1 + d2)


# ---------------------------------------------------------------------------
# records and configuration

STEP_INIT_SDE = "init_sde"
STEP_ODE_K1 = "ode_k1"
STEP_ODE_K2 = "ode_k2"
STEP_FINAL_EULER = "final_euler"
STEP_BASELINE_EM = "baseline_em"
STEP_BASELINE_HEUN = "baseline_heun"

_STEP_NFE = {
    STEP_INIT_SDE: 1,
    STEP_ODE_K1: 1,
    STEP_ODE_K2: 2,
    STEP_FINAL_EULER: 1,
    STEP_BASELINE_EM: 1,
    STEP_BASELINE_HEUN: 2,
}


@dataclass
class StepRecord:
    from_t: float
    to_t: float
    nfe_used: int
    step_kind: str
    x_after: np.ndarray

    def to_json_dict(self):
        return {
            "from_t": self.from_t,
            "to_t": self.to_t,
            "nfe_used": self.nfe_used,
            "step_kind": self.step_kind,
            "x_after": [float(v) for v in np.atleast_1d(self.x_after)],
        }


@dataclass
class RunRecord:
    """One sampled trajectory: per-step records, final state, exact NFE."""

    config: dict
    steps: list
    x_final: np.ndarray
    total_nfe: int
    wall_time_ms: float

    def to_json_dict(self, include_wall_time: bool = True):
        doc = {
            "config": self.config,
            "steps": [s.to_json_dict() for s in self.steps],
            "x_final": [float(v) for v in np.atleast_1d(self.x_final)],
            "total_nfe": self.total_nfe,
        }
        if include_wall_time:
            doc["wall_time_ms"] = self.wall_time_ms
        return doc


@dataclass(frozen=True)
class SolverConfig:
    """Which sampler to run and on what grid.

    ``epsilon_mode`` controls the initial stochastic step's target:
    ``grid`` lands on t_{N-1}; ``fixed`` replaces t_{N-1} by T - epsilon,
    keeping the step pattern and NFE budget unchanged.
    """

    kind: str
    grid: TimeGrid
    k: int = 2
    midpoint_ratio: float = 0.5
    seed: int = 0
    epsilon_mode: str = EPSILON_GRID
    epsilon: float = 1e-4

    def __post_init__(self):
        if self.kind not in SOLVER_KINDS:
            raise ConfigError(f"unknown solver kind {self.kind!r}")
        if self.k not in (1, 2):
            raise ConfigError("order k must be 1 or 2")
        if not (0.0 < self.midpoint_ratio < 1.0):
            raise ConfigError("midpoint_ratio must lie in (0, 1)")
        if not (0 <= int(self.seed) < (1 << 64)):
            raise ConfigError("seed must fit in 64 bits")
        if self.epsilon_mode not in (EPSILON_GRID, EPSILON_FIXED):
            raise ConfigError(f"unknown epsilon_mode {self.epsilon_mode!r}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")

    def snapshot(self) -> dict:
        return {
            "kind": self.kind,
            "k": self.k,
            "midpoint_ratio": self.midpoint_ratio,
            "seed": int(self.seed),
            "epsilon_mode": self.epsilon_mode,
            "epsilon": self.epsilon,
            "grid_scheme": self.grid.scheme,
            "n_steps": self.grid.n_steps,
            "times": list(self.grid.times),
        }


def effective_times(config: SolverConfig, T: float) -> list:
    """Grid times with the fixed-epsilon substitution applied."""
    times = list(config.grid.times)
    if abs(times[0] - T) > 1e-12 * max(1.0, T):
        raise ConfigError("grid must start at the problem's terminal time")
    if config.epsilon_mode == EPSILON_FIXED:
        t_eps = T - config.epsilon
        if not (times[2] < t_eps < T):
            raise ConfigError(
                "fixed epsilon target T - eps must fall between t_{N-2} and T")
        times[1] = t_eps
    return times


def step_plan(kind: str, k: int, n_steps: int):
    """Sequence of (step_kind, from_index, to_index) into the grid times.

    Every plan opens with the first-order SDE step from T. The alternating
    scheme then interleaves Euler-Maruyama and Heun steps starting with
    Euler-Maruyama; a Heun step that would land on t = 0 degrades to Euler
    because the PF ODE cannot be evaluated there.
    """
    n = n_steps
    if kind in (DBMSOLVER, DBIM1):
        ode_kind = STEP_ODE_K2 if (kind == DBMSOLVER and k == 2) else STEP_ODE_K1
        plan = [(STEP_INIT_SDE, 0, 1)]
        plan += [(ode_kind, i, i + 1) for i in range(1, n - 1)]
        plan.append((STEP_FINAL_EULER, n - 1, n))
        return plan
    if kind == EULER_MARUYAMA:
        return [(STEP_INIT_SDE, 0, 1)] + \
            [(STEP_BASELINE_EM, i, i + 1) for i in range(1, n)]
    if kind == ODES3:
        plan = [(STEP_INIT_SDE, 0, 1)]
        plan += [(STEP_BASELINE_HEUN, i, i + 1) for i in range(1, n - 1)]
        plan.append((STEP_FINAL_EULER, n - 1, n))
        return plan
    if kind == HYBRID_HEUN:
        plan = [(STEP_INIT_SDE, 0, 1)]
        for i in range(1, n):
            step = STEP_BASELINE_EM if i % 2 == 1 else STEP_BASELINE_HEUN
            if i == n - 1 and step == STEP_BASELINE_HEUN:
                step = STEP_FINAL_EULER
            plan.append((step, i, i + 1))
        return plan
    raise ConfigError(f"unknown solver kind {kind!r}")


def nfe_for(kind: str, k: int, n_steps: int) -> int:
    """Exact evaluation budget of a sampler configuration."""
    return sum(_STEP_NFE[s] for s, _, _ in step_plan(kind, k, n_steps))


# ---------------------------------------------------------------------------
# trajectory samplers

def _run_steps(problem, config, denoiser, x0, noise_fn, record_steps=True):
    times = effective_times(config, problem.T)
    plan = step_plan(config.kind, config.k, config.grid.n_steps)
    x = np.asarray(x0, dtype=float)
    steps = []
    for step_index, (step_kind, i_from, i_to) in enumerate(plan):
        s, t = times[i_from], times[i_to]
        if step_kind == STEP_INIT_SDE:
            d_out = denoiser(x, s, problem.x_T, problem.T)
            x = sde_step_from_noise(problem, x, s, t, d_out,
                                    noise_fn(step_index, x.shape))
        elif step_kind == STEP_ODE_K1:
            x = ode_step_k1(problem, x, s, t, denoiser)
        elif step_kind == STEP_ODE_K2:
            x = ode_step_k2(problem, x, s, t, denoiser, r=config.midpoint_ratio)
        elif step_kind == STEP_FINAL_EULER:
            x = final_euler_step(problem, x, s, denoiser)
        elif step_kind == STEP_BASELINE_EM:
            d_out = denoiser(x, s, problem.x_T, problem.T)
            x = em_step_from_noise(problem, x, s, t, d_out,
                                   noise_fn(step_index, x.shape))
        elif step_kind == STEP_BASELINE_HEUN:
            x = heun_step(problem, x, s, t, denoiser)
        if record_steps:
            steps.append(StepRecord(from_t=s, to_t=t, nfe_used=_STEP_NFE[step_kind],
                                    step_kind=step_kind, x_after=x))
    return x, steps


def sample_trajectory(problem: BridgeProblem, config: SolverConfig,
                      denoiser: Denoiser, traj_index: int = 0) -> RunRecord:
    """Run one trajectory from problem.x_T down to t = 0."""
    if problem.x_T.ndim != 1:
        raise ConfigError("sample_trajectory expects a single endpoint vector")
    seed = int(config.seed)

    def noise_fn(step_index, shape):
        return noise_stream(seed, traj_index, NOISE_STEP,
                            step_index).standard_normal(shape)

    start = time.perf_counter()
    nfe_before = denoiser.nfe
    x, steps = _run_steps(problem, config, denoiser, problem.x_T, noise_fn)
    wall_ms = (time.perf_counter() - start) * 1e3
    return RunRecord(config=config.snapshot(), steps=steps, x_final=x,
                     total_nfe=denoiser.nfe - nfe_before, wall_time_ms=wall_ms)


def dbmsolver_sample(problem, config, denoiser, traj_index: int = 0) -> RunRecord:
    """Initial SDE step, k-th order exponential-integrator refinement,
    final Euler update. Total NFE = 2 + k (N - 2)."""
    if config.kind not in (DBMSOLVER, DBIM1):
        raise ConfigError("dbmsolver_sample requires kind 'dbmsolver' or 'dbim1'")
    return sample_trajectory(problem, config, denoiser, traj_index)


def em_sde_sample(problem, config, denoiser, traj_index: int = 0) -> RunRecord:
    if config.kind != EULER_MARUYAMA:
        raise ConfigError("em_sde_sample requires kind 'euler_maruyama'")
    return sample_trajectory(problem, config, denoiser, traj_index)


def hybrid_heun_sample(problem, config, denoiser, traj_index: int = 0) -> RunRecord:
    if config.kind != HYBRID_HEUN:
        raise ConfigError("hybrid_heun_sample requires kind 'hybrid_heun'")
    return sample_trajectory(problem, config, denoiser, traj_index)


def odes3_sample(problem, config, denoiser, traj_index: int = 0) -> RunRecord:
    if config.kind != ODES3:
        raise ConfigError("odes3_sample requires kind 'odes3'")
    return sample_trajectory(problem, config, denoiser, traj_index)


@dataclass
class BatchResult:
    x_final: np.ndarray
    total_nfe: int
    n_steps: int


def sample_batch(problem: BridgeProblem, config: SolverConfig, denoiser: Denoiser,
                 traj_indices) -> BatchResult:
    """Run a batch of trajectories at once.

    ``problem.x_T`` must be (B, d) aligned with ``traj_indices``; noise is
    assembled per trajectory from the same keyed streams as single runs,
    so row j equals the single-trajectory result for trajectory j.
    """
    traj_indices = np.atleast_1d(np.asarray(traj_indices, dtype=int))
    if problem.x_T.ndim != 2 or problem.x_T.shape[0] != len(traj_indices):
        raise ConfigError("sample_batch needs x_T of shape (B, d) matching traj_indices")
    seed = int(config.seed)
    d = problem.dim

    def noise_fn(step_index, shape):
        return step_noise(seed, traj_indices, step_index, d)

    nfe_before = denoiser.nfe
    x, _ = _run_steps(problem, config, denoiser, problem.x_T, noise_fn,
                      record_steps=False)
    return BatchResult(x_final=x, total_nfe=denoiser.nfe - nfe_before,
                       n_steps=config.grid.n_steps)
