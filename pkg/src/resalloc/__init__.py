"""Attack-resilient primal-dual distributed resource allocation.

A coordinator iteratively prices shared coupling constraints while
agents respond with local projected updates.  The package provides the
clean baseline loop, a simulated attack layer that corrupts uplink
channels, robust mean estimators that keep the price signal trustworthy,
the resilient loop built from them, and a configuration-driven
experiment CLI with bound checking.
"""

from .aggregation import (
    Estimate,
    FilterBudgetError,
    FilterRule,
    MedianNeighborhood,
    NaiveMean,
    bruteforce_trusted_mean,
    capped_simplex_project,
    coordinate_median,
    filter_mean,
    median_neighborhood_error_bound,
    median_neighborhood_mean,
    naive_mean,
    saddle_solve,
)
from .attacks import (
    AttackPlan,
    ContaminationStats,
    CoordinatedShift,
    LargeRandom,
    SignFlip,
    StaleReplay,
    UplinkBatch,
    apply_attack,
    contamination_stats,
)
from .config import ConfigError, RunConfig, load_config
from .engine import (
    NonFiniteIterateError,
    PrimalDualState,
    ReferenceSolveError,
    StepConfig,
    dual_gradient,
    estimate_lipschitz,
    pda_step,
    primal_gradient,
    reference_saddle_point,
    run_primal_dual,
    saddle_jacobian,
)
from .fixtures import Fixture, build_fixture, random_quadratic_problem
from .problem import (
    AllocationProblem,
    Ball,
    Box,
    Constraint,
    CustomUtility,
    LogUtility,
    QuadraticUtility,
    RobustProblemView,
    affine_constraint,
    conservative_offset,
    project,
    quadratic_constraint,
    regularized_lagrangian,
    robust_view,
)
from .resilient import (
    DualCap,
    PerturbationRecord,
    PriceSignal,
    check_perturbed_contraction,
    default_dual_cap,
    perturbation_norm_bounds,
    perturbation_vectors,
    resilient_dual_step,
    resilient_lipschitz,
    resilient_primal_step,
    resilient_reference,
    run_resilient,
)
from .trace import (
    RunTrace,
    contraction_coefficient,
    perturbation_gain,
    recompute_summary,
    steady_state_error_bound,
)

__version__ = "0.1.0"
