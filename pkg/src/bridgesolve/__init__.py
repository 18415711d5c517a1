"""bridgesolve: exponential-integrator samplers for diffusion bridges.

The library solves the reverse-time bridge SDE and its probability-flow
ODE with closed-form exponential-integrator steps, ships the standard
baseline schemes, analytic posterior-mean denoisers in place of a trained
network, and a verification harness (quadrature oracles, fine-step
references, convergence studies, sliced Wasserstein distance).
"""

from ._tuning import tune_allocator as _tune_allocator

_tune_allocator()

from .errors import (
    BridgeError,
    ConfigError,
    DomainError,
    OracleError,
    OrderingError,
    SingularityError,
    UnsupportedOrderError,
)
from .schedules import (
    UNIFORM_LAMBDA,
    UNIFORM_T,
    VE,
    VP,
    ScheduleParams,
    TimeGrid,
    alpha,
    diffusion_sq,
    drift_factor,
    half_log_snr,
    make_grid,
    rho,
    sigma,
    snr,
    t_of_lambda,
)
from .bridge import (
    BridgeProblem,
    Denoiser,
    State,
    pf_ode_rhs,
    score_from_x0,
    sde_rhs_deterministic,
    semilinear_split,
    transition_score,
)
from .models import (
    AffineLambdaDenoiser,
    ConstantDenoiser,
    GaussianPosteriorDenoiser,
    GaussianPrior,
    GmmPosteriorDenoiser,
    GmmPrior,
    affine_lambda_denoiser,
    bridge_marginal_coeffs,
    constant_denoiser,
    gaussian_posterior_denoiser,
    gmm_posterior_denoiser,
)
from .solvers import (
    DBIM1,
    DBMSOLVER,
    EULER_MARUYAMA,
    HYBRID_HEUN,
    ODES3,
    SOLVER_KINDS,
    BatchResult,
    RunRecord,
    SolverConfig,
    StepRecord,
    dbmsolver_sample,
    em_sde_sample,
    exp_integral,
    final_euler_step,
    hybrid_heun_sample,
    nfe_for,
    noise_stream,
    ode_coeffs,
    ode_step_k1,
    ode_step_k2,
    odes3_sample,
    sample_batch,
    sample_trajectory,
    sde_step_order1,
)
from .harness import (
    ConvergenceReport,
    MetricReport,
    convergence_study,
    em_reference_batch,
    energy_distance,
    fine_reference_ode,
    fine_reference_sde,
    quadrature_oracle,
    sliced_wasserstein,
)

__version__ = "0.1.0"
