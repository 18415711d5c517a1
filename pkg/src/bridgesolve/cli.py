"""Configuration-driven experiment runner.

Commands::

    bridgesolve integrals   --config cfg.json [--out DIR] [--seed N]
    bridgesolve convergence --config cfg.json [--out DIR] [--seed N]
    bridgesolve benchmark   --config cfg.json [--out DIR] [--seed N]
    bridgesolve sample      --config cfg.json [--out DIR] [--seed N]

The config is a flat JSON document with four named blocks (schedule,
model, solver, run); defaults are materialized into config_resolved.json
in the output directory. Exit status: 0 all checks passed, 1 a numerical
check failed, 2 configuration error.

Every CSV/JSON artifact is byte-deterministic given (config, seed);
floats are written in shortest round-trip form. Wall-clock measurements
go to a timings.txt sidecar, which is the one intentionally
non-deterministic output.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from .bridge import BridgeProblem, Denoiser
from .errors import BridgeError, ConfigError
from .harness import (
    em_reference_batch,
    quadrature_oracle,
    shared_study_inputs,
    convergence_study,
    sliced_wasserstein,
)
from .models import (
    AffineLambdaDenoiser,
    ConstantDenoiser,
    GaussianPosteriorDenoiser,
    GaussianPrior,
    GmmPosteriorDenoiser,
    GmmPrior,
)
from .schedules import (
    UNIFORM_LAMBDA,
    UNIFORM_T,
    VE,
    VP,
    ScheduleParams,
    make_grid,
)
from .solvers import (
    NOISE_AUX,
    SOLVER_KINDS,
    SolverConfig,
    endpoint_noise,
    exp_integral,
    nfe_for,
    noise_stream,
    sample_batch,
    sample_trajectory,
)

SLOPE_BANDS = {"ode_k1": (0.8, 1.3), "ode_k2": (1.7, 2.4), "heun": (1.7, 2.4)}

_DEFAULTS = {
    "schedule": {
        "kind": "vp",
        "T": 1.0,
        "t_min": None,
        "sigma_scale": 1.0,
        "beta_min": 0.1,
        "beta_max": 20.0,
    },
    "model": {
        "prior": {"kind": "gaussian", "mean": [0.0], "var": [1.0]},
        "endpoint": {"kind": "fixed", "value": [1.0]},
    },
    "solver": {
        "kind": "dbmsolver",
        "k": 2,
        "midpoint_ratio": 0.5,
        "grid_scheme": "uniform_t",
        "epsilon_mode": "grid",
        "epsilon": 1e-4,
        "n_steps": None,
        "nfe_budget": None,
        # convergence-specific
        "solvers": ["ode_k1", "ode_k2", "heun"],
        "step_counts": [8, 16, 32, 64, 128],
        "reference_substeps": 20000,
        "start_time": None,
        # benchmark-specific
        "cells": [
            {"kind": "dbmsolver", "k": 2, "nfe_budget": 6},
            {"kind": "dbmsolver", "k": 2, "nfe_budget": 20},
            {"kind": "hybrid_heun", "nfe_budget": 18},
            {"kind": "odes3", "nfe_budget": 28},
        ],
    },
    "run": {
        "seed": 0,
        "batch": 16,
        "out_dir": "out",
        "reference_steps": 100000,
        "sw_projections": 128,
        "dump_trajectories": False,
    },
    "integrals": {
        "n_triples": 1000,
        "lam_T_low": -3.0,
        "lam_T_high": 2.0,
        "spread_low": 1e-4,
        "spread_high": 5.0,
        "rel_tol": 1e-8,
    },
}


# ---------------------------------------------------------------------------
# config handling

def _merge(defaults, user, path=""):
    if not isinstance(user, dict):
        raise ConfigError(f"block {path or 'config'} must be a JSON object")
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and key not in ("prior", "endpoint"):
            out[key] = _merge(defaults[key], val, path + key + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for key in raw:
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown top-level block {key!r}; "
                              "expected schedule/model/solver/run/integrals")
    return {block: _merge(_DEFAULTS[block], raw.get(block, {}))
            for block in _DEFAULTS}


def build_schedule(cfg: dict) -> ScheduleParams:
    sc = cfg["schedule"]
    kind = sc["kind"]
    if kind == VE:
        return ScheduleParams.ve(scale=float(sc["sigma_scale"]), T=float(sc["T"]),
                                 t_min=sc["t_min"])
    if kind == VP:
        return ScheduleParams.vp(beta_min=float(sc["beta_min"]),
                                 beta_max=float(sc["beta_max"]),
                                 T=float(sc["T"]), t_min=sc["t_min"])
    raise ConfigError(f"schedule kind must be 've' or 'vp', got {kind!r}")


def build_denoiser(cfg: dict, schedule: ScheduleParams) -> Denoiser:
    prior = cfg["model"]["prior"]
    kind = prior.get("kind")
    if kind == "gaussian":
        return GaussianPosteriorDenoiser(
            GaussianPrior(mean=prior["mean"], var=prior["var"]), schedule)
    if kind == "gmm":
        return GmmPosteriorDenoiser(
            GmmPrior(weights=prior["weights"], means=prior["means"],
                     vars=prior["vars"]), schedule)
    if kind == "constant":
        return ConstantDenoiser(prior["value"])
    if kind == "affine_lambda":
        return AffineLambdaDenoiser(prior["c0"], prior["c1"], schedule)
    raise ConfigError(f"unknown prior kind {kind!r}")


def model_dim(cfg: dict) -> int:
    prior = cfg["model"]["prior"]
    kind = prior.get("kind")
    if kind == "gaussian":
        return len(prior["mean"])
    if kind == "gmm":
        return len(prior["means"][0])
    if kind == "constant":
        return len(prior["value"])
    if kind == "affine_lambda":
        return len(prior["c0"])
    raise ConfigError(f"unknown prior kind {kind!r}")


def draw_endpoints(cfg: dict, seed: int, batch: int, d: int) -> np.ndarray:
    ep = cfg["model"]["endpoint"]
    kind = ep.get("kind")
    if kind == "fixed":
        value = np.asarray(ep["value"], dtype=float)
        if value.shape != (d,):
            raise ConfigError(f"endpoint value must have dimension {d}")
        return np.tile(value, (batch, 1))
    if kind == "gaussian":
        mean = np.asarray(ep["mean"], dtype=float)
        if mean.shape != (d,):
            raise ConfigError(f"endpoint mean must have dimension {d}")
        std = float(ep.get("std", 1.0))
        return mean + std * endpoint_noise(seed, range(batch), d)
    raise ConfigError(f"unknown endpoint kind {kind!r}")


def resolve_n_steps(kind: str, k: int, n_steps, nfe_budget, n_max: int = 100000) -> int:
    """Turn an NFE budget into a step count, refusing unreachable budgets."""
    if (n_steps is None) == (nfe_budget is None):
        raise ConfigError("specify exactly one of n_steps or nfe_budget")
    if n_steps is not None:
        n = int(n_steps)
        if n < 3:
            raise ConfigError("n_steps must be at least 3")
        return n
    budget = int(nfe_budget)
    below = above = None
    n = 3
    while n <= n_max:
        got = nfe_for(kind, k, n)
        if got == budget:
            return n
        if got < budget:
            below = got
        else:
            above = got
            break
        n += 1
    raise ConfigError(
        f"nfe_budget={budget} is not achievable for {kind} (k={k}); "
        f"nearest achievable budgets: {below} and {above}")


def build_solver_config(cfg: dict, schedule: ScheduleParams, seed: int,
                        cell: dict | None = None) -> SolverConfig:
    sv = cfg["solver"]
    merged = dict(kind=sv["kind"], k=sv["k"], n_steps=sv["n_steps"],
                  nfe_budget=sv["nfe_budget"])
    if cell is not None:
        extra = set(cell) - {"kind", "k", "n_steps", "nfe_budget"}
        if extra:
            raise ConfigError(f"unknown benchmark cell keys {sorted(extra)}")
        for key in ("kind", "k", "n_steps", "nfe_budget"):
            if key in cell:
                merged[key] = cell[key]
        if "nfe_budget" in cell and "n_steps" not in cell:
            merged["n_steps"] = None
        if "n_steps" in cell and "nfe_budget" not in cell:
            merged["nfe_budget"] = None
    if merged["n_steps"] is None and merged["nfe_budget"] is None:
        merged["n_steps"] = 11
    kind = merged["kind"]
    if kind not in SOLVER_KINDS:
        raise ConfigError(f"unknown solver kind {kind!r}")
    k = int(merged["k"])
    n = resolve_n_steps(kind, k, merged["n_steps"], merged["nfe_budget"])
    scheme = sv["grid_scheme"]
    if scheme not in (UNIFORM_T, UNIFORM_LAMBDA):
        raise ConfigError(f"unknown grid scheme {scheme!r}")
    grid = make_grid(schedule, n, scheme)
    return SolverConfig(kind=kind, grid=grid, k=k,
                        midpoint_ratio=float(sv["midpoint_ratio"]), seed=seed,
                        epsilon_mode=sv["epsilon_mode"],
                        epsilon=float(sv["epsilon"]))


# ---------------------------------------------------------------------------
# deterministic writers

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, header, rows):
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_timings(out_dir: Path, entries):
    lines = [f"{label}\t{ms:.3f} ms" for label, ms in entries]
    (out_dir / "timings.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_integrals(cfg: dict, out_dir: Path) -> int:
    spec = cfg["integrals"]
    seed = int(cfg["run"]["seed"])
    rng = noise_stream(seed, 0, NOISE_AUX, 1)
    rel_tol = float(spec["rel_tol"])
    rows = []
    worst = 0.0
    # fixed degenerate rows: zero-width integrals report 0, 0, 0
    for n in (0, 1):
        rows.append((0.0, 0.5, 0.5, n, 0.0, 0.0, 0.0))
    log_lo, log_hi = math.log10(spec["spread_low"]), math.log10(spec["spread_high"])
    for _ in range(int(spec["n_triples"])):
        lam_T = rng.uniform(spec["lam_T_low"], spec["lam_T_high"])
        lam_s = lam_T + 10.0 ** rng.uniform(log_lo, log_hi)
        lam_t = lam_s + 10.0 ** rng.uniform(log_lo, log_hi)
        for n in (0, 1):
            closed = exp_integral(n, lam_s, lam_t, lam_T)
            # tolerance proportional to the value keeps the oracle two
            # orders tighter than the 1e-8 relative gate even for the
            # near-degenerate spreads
            quad = quadrature_oracle(n, lam_s, lam_t, lam_T,
                                     tol=max(1e-10 * abs(closed), 1e-280))
            denom = max(abs(quad), 1e-300)
            rel = abs(closed - quad) / denom if (closed or quad) else 0.0
            worst = max(worst, rel)
            rows.append((lam_T, lam_s, lam_t, n, closed, quad, rel))
    write_csv(out_dir / "integrals.csv",
              ("lam_T", "lam_s", "lam_t", "n", "closed_form", "quadrature",
               "rel_err"), rows)
    write_json(out_dir / "integrals_summary.json",
               {"n_rows": len(rows), "worst_rel_err": worst,
                "rel_tol": rel_tol, "passed": bool(worst <= rel_tol)})
    return 0 if worst <= rel_tol else 1


def cmd_convergence(cfg: dict, out_dir: Path) -> int:
    sv = cfg["solver"]
    seed = int(cfg["run"]["seed"])
    schedule = build_schedule(cfg)
    denoiser = build_denoiser(cfg, schedule)
    d = model_dim(cfg)
    endpoint = draw_endpoints(cfg, seed, 1, d)[0]
    problem = BridgeProblem(schedule=schedule, x_T=endpoint)
    step_counts = [int(n) for n in sv["step_counts"]]
    solvers = list(sv["solvers"])
    for name in solvers:
        if name not in SLOPE_BANDS:
            raise ConfigError(f"unknown convergence solver {name!r}")

    start_time, x_start, reference = shared_study_inputs(
        problem, denoiser, start_time=sv["start_time"],
        reference_substeps=int(sv["reference_substeps"]), seed=seed)

    rows = []
    summary = {}
    all_pass = True
    for name in solvers:
        report = convergence_study(problem, name, denoiser, step_counts,
                                   start_time=start_time, seed=seed,
                                   midpoint_ratio=float(sv["midpoint_ratio"]),
                                   reference=reference, x_start=x_start)
        lo, hi = SLOPE_BANDS[name]
        passed = report.exact or (lo <= report.fitted_slope <= hi)
        all_pass = all_pass and passed
        for n, err in zip(report.step_counts, report.errors):
            rows.append((name, n, err))
        doc = report.to_json_dict()
        doc["band"] = [lo, hi]
        doc["passed"] = bool(passed)
        if report.exact:
            doc["fitted_slope"] = None
            doc["r_squared"] = None
        summary[name] = doc
    write_csv(out_dir / "convergence.csv", ("solver", "N", "error"), rows)
    write_json(out_dir / "convergence_summary.json", summary)
    return 0 if all_pass else 1


def cmd_benchmark(cfg: dict, out_dir: Path) -> int:
    run = cfg["run"]
    seed = int(run["seed"])
    batch = int(run["batch"])
    schedule = build_schedule(cfg)
    denoiser = build_denoiser(cfg, schedule)
    d = model_dim(cfg)
    endpoints = draw_endpoints(cfg, seed, batch, d)
    problem = BridgeProblem(schedule=schedule, x_T=endpoints)
    n_proj = int(run["sw_projections"])
    ref_steps = int(run["reference_steps"])
    timings = []

    t0 = time.perf_counter()
    reference = em_reference_batch(problem, denoiser, ref_steps, seed)
    timings.append(("reference", (time.perf_counter() - t0) * 1e3))
    t0 = time.perf_counter()
    resample = em_reference_batch(problem, denoiser, ref_steps,
                                  (seed + 1) & ((1 << 64) - 1))
    timings.append(("reference_resample", (time.perf_counter() - t0) * 1e3))
    floor = sliced_wasserstein(reference, resample, n_proj, seed).value

    rows = []
    cells_doc = []
    for cell in cfg["solver"]["cells"]:
        config = build_solver_config(cfg, schedule, seed, cell)
        budget = nfe_for(config.kind, config.k, config.grid.n_steps)
        t0 = time.perf_counter()
        result = sample_batch(problem, config, denoiser, range(batch))
        wall_ms = (time.perf_counter() - t0) * 1e3
        if result.total_nfe != budget:
            raise BridgeError(
                f"NFE accounting mismatch for {config.kind}: "
                f"{result.total_nfe} != {budget}")
        sw = sliced_wasserstein(result.x_final, reference, n_proj, seed).value
        label = config.kind if config.kind != "dbmsolver" \
            else f"dbmsolver_k{config.k}"
        rows.append((label, budget, sw))
        cells_doc.append({"solver": label, "kind": config.kind, "k": config.k,
                          "n_steps": config.grid.n_steps, "nfe": budget,
                          "sw": sw})
        timings.append((f"{label}@{budget}", wall_ms))

    write_csv(out_dir / "benchmark.csv", ("solver", "nfe", "sw"), rows)
    write_csv(out_dir / "reference.csv",
              tuple(f"x{i}" for i in range(d)),
              [tuple(row) for row in reference])
    write_json(out_dir / "benchmark_summary.json",
               {"noise_floor_sw": floor, "cells": cells_doc,
                "n_samples": batch, "n_projections": n_proj,
                "reference_steps": ref_steps})
    write_timings(out_dir, timings)
    return 0


def cmd_sample(cfg: dict, out_dir: Path) -> int:
    run = cfg["run"]
    seed = int(run["seed"])
    batch = int(run["batch"])
    schedule = build_schedule(cfg)
    denoiser = build_denoiser(cfg, schedule)
    d = model_dim(cfg)
    endpoints = draw_endpoints(cfg, seed, batch, d)
    config = build_solver_config(cfg, schedule, seed)
    rows = []
    for i in range(batch):
        problem = BridgeProblem(schedule=schedule, x_T=endpoints[i])
        record = sample_trajectory(problem, config, denoiser, traj_index=i)
        write_json(out_dir / f"run_{i}.json",
                   record.to_json_dict(include_wall_time=False))
        if run["dump_trajectories"]:
            traj_rows = [(j, s.to_t) + tuple(np.atleast_1d(s.x_after))
                         for j, s in enumerate(record.steps)]
            write_csv(out_dir / f"traj_{i}.csv",
                      ("step_index", "t") + tuple(f"x{c}" for c in range(d)),
                      traj_rows)
        rows.append((i, record.total_nfe) + tuple(np.atleast_1d(record.x_final)))
    write_csv(out_dir / "samples.csv",
              ("traj", "total_nfe") + tuple(f"x{c}" for c in range(d)), rows)
    return 0


_COMMANDS = {
    "integrals": cmd_integrals,
    "convergence": cmd_convergence,
    "benchmark": cmd_benchmark,
    "sample": cmd_sample,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bridgesolve",
        description="Diffusion-bridge sampler experiments and checks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
    args = parser.parse_args(argv)

    try:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {exc.filename}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        cfg = resolve_config(raw)
        if args.seed is not None:
            if not (0 <= args.seed < (1 << 64)):
                raise ConfigError("seed must fit in 64 bits")
            cfg["run"]["seed"] = args.seed
        # the --out override steers file placement only; the resolved echo
        # keeps the config's own out_dir so re-runs stay byte-identical
        out_dir = Path(args.out if args.out is not None else cfg["run"]["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "config_resolved.json", cfg)
        status = _COMMANDS[args.command](cfg, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BridgeError as exc:
        print(f"numerical check failed: {exc}", file=sys.stderr)
        return 1
    return status


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
