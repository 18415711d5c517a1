"""End-to-end trajectory samplers: NFE accounting, determinism, structure."""

import math

import numpy as np
import pytest

from bridgesolve import (
    BridgeProblem,
    ConfigError,
    ConstantDenoiser,
    DBIM1,
    DBMSOLVER,
    EULER_MARUYAMA,
    GaussianPosteriorDenoiser,
    GaussianPrior,
    HYBRID_HEUN,
    ODES3,
    SolverConfig,
    UNIFORM_LAMBDA,
    dbmsolver_sample,
    em_sde_sample,
    hybrid_heun_sample,
    make_grid,
    nfe_for,
    ode_step_k1,
    ode_step_k2,
    odes3_sample,
    sample_batch,
    sample_trajectory,
)
from bridgesolve.solvers import (
    EPSILON_FIXED,
    STEP_BASELINE_EM,
    STEP_BASELINE_HEUN,
    STEP_FINAL_EULER,
    STEP_INIT_SDE,
    effective_times,
    step_plan,
)


@pytest.fixture
def den(vp):
    return GaussianPosteriorDenoiser(
        GaussianPrior(mean=[0.3, -0.2], var=[0.6, 0.9]), vp)


class TestNfeAccounting:
    @pytest.mark.parametrize("n,k,expect", [(4, 2, 6), (11, 2, 20),
                                            (4, 1, 4), (10, 1, 10)])
    def test_dbmsolver_budget(self, vp, vp_problem, den, n, k, expect):
        config = SolverConfig(kind=DBMSOLVER, grid=make_grid(vp, n), k=k, seed=1)
        before = den.nfe
        record = dbmsolver_sample(vp_problem, config, den)
        assert record.total_nfe == expect
        assert den.nfe - before == expect
        assert record.total_nfe == sum(s.nfe_used for s in record.steps)

    def test_published_hybrid_heun_budget(self):
        assert nfe_for(HYBRID_HEUN, 2, 80) == 119
        assert nfe_for(HYBRID_HEUN, 2, 13) == 18

    @pytest.mark.parametrize("kind,n", [(EULER_MARUYAMA, 10), (HYBRID_HEUN, 13),
                                        (ODES3, 15), (DBIM1, 9)])
    def test_counter_matches_for_baselines(self, vp, vp_problem, den, kind, n):
        config = SolverConfig(kind=kind, grid=make_grid(vp, n), seed=2)
        before = den.nfe
        record = sample_trajectory(vp_problem, config, den)
        assert record.total_nfe == nfe_for(kind, 2, n)
        assert den.nfe - before == record.total_nfe

    def test_per_step_records(self, vp, vp_problem, den):
        config = SolverConfig(kind=HYBRID_HEUN, grid=make_grid(vp, 13), seed=2)
        record = hybrid_heun_sample(vp_problem, config, den)
        n_em = sum(1 for s in record.steps if s.step_kind == STEP_BASELINE_EM)
        n_heun = sum(1 for s in record.steps if s.step_kind == STEP_BASELINE_HEUN)
        assert record.total_nfe == 1 + n_em + 2 * n_heun + \
            sum(1 for s in record.steps if s.step_kind == STEP_FINAL_EULER)


class TestStepPlans:
    def test_dbmsolver_plan_shape(self):
        plan = step_plan(DBMSOLVER, 2, 6)
        kinds = [k for k, _, _ in plan]
        assert kinds[0] == STEP_INIT_SDE
        assert kinds[-1] == STEP_FINAL_EULER
        assert all(k == "ode_k2" for k in kinds[1:-1])

    def test_hybrid_alternation(self):
        kinds = [k for k, _, _ in step_plan(HYBRID_HEUN, 2, 9)]
        assert kinds[0] == STEP_INIT_SDE
        assert kinds[1] == STEP_BASELINE_EM
        assert kinds[2] == STEP_BASELINE_HEUN
        # a Heun step may not target t = 0
        assert kinds[-1] in (STEP_BASELINE_EM, STEP_FINAL_EULER)

    def test_odes3_plan(self):
        kinds = [k for k, _, _ in step_plan(ODES3, 2, 7)]
        assert kinds == [STEP_INIT_SDE] + [STEP_BASELINE_HEUN] * 5 \
            + [STEP_FINAL_EULER]

    def test_no_heun_into_zero(self):
        for n in range(3, 40):
            plan = step_plan(HYBRID_HEUN, 2, n)
            assert plan[-1][0] != STEP_BASELINE_HEUN


class TestDeterminism:
    def test_bit_identical_replay(self, vp, vp_problem, den):
        config = SolverConfig(kind=DBMSOLVER, grid=make_grid(vp, 8), k=2, seed=99)
        r1 = sample_trajectory(vp_problem, config, den)
        r2 = sample_trajectory(vp_problem, config, den)
        assert np.array_equal(r1.x_final, r2.x_final)
        for s1, s2 in zip(r1.steps, r2.steps):
            assert np.array_equal(s1.x_after, s2.x_after)
            assert (s1.from_t, s1.to_t, s1.step_kind) == \
                (s2.from_t, s2.to_t, s2.step_kind)

    def test_seed_changes_output(self, vp, vp_problem, den):
        g = make_grid(vp, 8)
        r1 = sample_trajectory(vp_problem,
                               SolverConfig(kind=DBMSOLVER, grid=g, seed=1), den)
        r2 = sample_trajectory(vp_problem,
                               SolverConfig(kind=DBMSOLVER, grid=g, seed=2), den)
        assert not np.array_equal(r1.x_final, r2.x_final)

    def test_batch_rows_equal_single_runs(self, vp, den):
        rng = np.random.default_rng(8)
        endpoints = rng.normal(size=(5, 2))
        config = SolverConfig(kind=HYBRID_HEUN, grid=make_grid(vp, 9), seed=4)
        batch = sample_batch(BridgeProblem(schedule=vp, x_T=endpoints),
                             config, den, range(5))
        for j in range(5):
            single = sample_trajectory(
                BridgeProblem(schedule=vp, x_T=endpoints[j]), config, den,
                traj_index=j)
            assert np.array_equal(batch.x_final[j], single.x_final)


class TestMarkovStructure:
    def test_stepwise_replay_through_fresh_instances(self, vp, den):
        """Each deterministic step consumes only (x_s, s, x_T): replaying
        the recorded steps through fresh problem objects reproduces the
        trajectory exactly."""
        x_T = np.array([0.8, -0.4])
        problem = BridgeProblem(schedule=vp, x_T=x_T)
        config = SolverConfig(kind=DBMSOLVER, grid=make_grid(vp, 7), k=2, seed=3)
        record = dbmsolver_sample(problem, config, den)
        times = effective_times(config, problem.T)
        x = record.steps[0].x_after  # after the stochastic step
        for idx, step in enumerate(record.steps[1:-1], start=1):
            fresh = BridgeProblem(schedule=vp, x_T=x_T.copy())
            x = ode_step_k2(fresh, x, times[idx], times[idx + 1], den,
                            r=config.midpoint_ratio)
            assert np.array_equal(x, step.x_after)


class TestEpsilonModes:
    def test_fixed_epsilon_replaces_second_time(self, vp, vp_problem, den):
        config = SolverConfig(kind=DBMSOLVER, grid=make_grid(vp, 6), k=2,
                              seed=1, epsilon_mode=EPSILON_FIXED, epsilon=1e-4)
        times = effective_times(config, vp_problem.T)
        assert times[1] == pytest.approx(vp.T - 1e-4, rel=1e-12)
        record = dbmsolver_sample(vp_problem, config, den)
        assert record.total_nfe == nfe_for(DBMSOLVER, 2, 6)

    def test_fixed_epsilon_must_fit(self, vp, den):
        config = SolverConfig(kind=DBMSOLVER, grid=make_grid(vp, 6), k=2,
                              seed=1, epsilon_mode=EPSILON_FIXED, epsilon=0.9)
        with pytest.raises(ConfigError):
            effective_times(config, vp.T)


class TestKindValidation:
    def test_named_wrappers_enforce_kind(self, vp, vp_problem, den):
        g = make_grid(vp, 6)
        with pytest.raises(ConfigError):
            dbmsolver_sample(vp_problem,
                             SolverConfig(kind=ODES3, grid=g, seed=1), den)
        with pytest.raises(ConfigError):
            em_sde_sample(vp_problem,
                          SolverConfig(kind=DBMSOLVER, grid=g, seed=1), den)
        with pytest.raises(ConfigError):
            odes3_sample(vp_problem,
                         SolverConfig(kind=HYBRID_HEUN, grid=g, seed=1), den)

    def test_config_validation(self, vp):
        g = make_grid(vp, 6)
        with pytest.raises(ConfigError):
            SolverConfig(kind="nope", grid=g)
        with pytest.raises(ConfigError):
            SolverConfig(kind=DBMSOLVER, grid=g, k=3)
        with pytest.raises(ConfigError):
            SolverConfig(kind=DBMSOLVER, grid=g, midpoint_ratio=0.0)
        with pytest.raises(ConfigError):
            SolverConfig(kind=DBMSOLVER, grid=g, seed=-1)


class TestMutualConvergence:
    def test_odes3_approaches_dbim1_limit(self, ve):
        """With a constant denoiser both deterministic phases converge to
        the same exact solution; at N = 512 the endpoint gap is tiny."""
        problem = BridgeProblem(schedule=ve, x_T=np.array([1.1]))
        den = ConstantDenoiser([0.45])
        n = 512
        grid = make_grid(ve, n, UNIFORM_LAMBDA)
        cfg_k1 = SolverConfig(kind=DBIM1, grid=grid, k=1, seed=12)
        cfg_o3 = SolverConfig(kind=ODES3, grid=grid, seed=12)
        r_k1 = sample_trajectory(problem, cfg_k1, den)
        r_o3 = sample_trajectory(problem, cfg_o3, den)
        assert np.allclose(r_k1.x_final, r_o3.x_final, atol=1e-4)

    def test_dbim1_is_dbmsolver_k1(self, vp, vp_problem, den):
        g = make_grid(vp, 9)
        r1 = sample_trajectory(vp_problem,
                               SolverConfig(kind=DBIM1, grid=g, k=1, seed=6), den)
        r2 = sample_trajectory(vp_problem,
                               SolverConfig(kind=DBMSOLVER, grid=g, k=1, seed=6),
                               den)
        assert np.array_equal(r1.x_final, r2.x_final)


class TestDistributionRecovery:
    def test_em_reference_recovers_prior(self, vp, den):
        """Running the reverse bridge from a fixed endpoint reproduces the
        prior over x_0: the ground-truth role of the fine EM sampler."""
        from bridgesolve import em_reference_batch
        B = 4000
        endpoints = np.tile(np.array([1.0, -0.5]), (B, 1))
        problem = BridgeProblem(schedule=vp, x_T=endpoints)
        x0 = em_reference_batch(problem, den, 2000, seed=11)
        se_mean = math.sqrt(0.9 / B)
        assert np.all(np.abs(x0.mean(axis=0) - [0.3, -0.2]) < 5 * se_mean)
        se_var = 0.9 * math.sqrt(2.0 / (B - 1))
        assert np.all(np.abs(x0.var(axis=0) - [0.6, 0.9]) < 5 * se_var + 0.01)

    def test_dbmsolver_recovers_prior(self, vp, den):
        B = 4000
        endpoints = np.tile(np.array([1.0, -0.5]), (B, 1))
        problem = BridgeProblem(schedule=vp, x_T=endpoints)
        config = SolverConfig(kind=DBMSOLVER, grid=make_grid(vp, 64), k=2, seed=5)
        res = sample_batch(problem, config, den, range(B))
        se_mean = math.sqrt(0.9 / B)
        assert np.all(np.abs(res.x_final.mean(axis=0) - [0.3, -0.2])
                      < 5 * se_mean + 0.01)
        se_var = 0.9 * math.sqrt(2.0 / (B - 1))
        assert np.all(np.abs(res.x_final.var(axis=0) - [0.6, 0.9])
                      < 5 * se_var + 0.02)


class TestRunRecordSerialization:
    def test_json_document_shape(self, vp, vp_problem, den):
        config = SolverConfig(kind=DBMSOLVER, grid=make_grid(vp, 5), k=2, seed=7)
        record = dbmsolver_sample(vp_problem, config, den)
        doc = record.to_json_dict()
        assert set(doc) == {"config", "steps", "x_final", "total_nfe",
                            "wall_time_ms"}
        assert doc["total_nfe"] == record.total_nfe
        assert len(doc["steps"]) == len(record.steps)
        slim = record.to_json_dict(include_wall_time=False)
        assert "wall_time_ms" not in slim
        import json
        json.dumps(doc)  # must be serializable
