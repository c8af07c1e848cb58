"""Operator-splitting simulator for federated learning algorithms.

The package treats a federated problem as the minimization of a weighted
sum of per-user objectives over the consensus subspace of a product space,
and runs one parameterized iteration whose coefficient choices reproduce
averaged-gradient, proximal, reflected and half-averaged algorithms, with
optional user sampling, minibatch local solvers and server-side Anderson
extrapolation.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .anderson import (
    AndersonConfig,
    AndersonMemory,
    DegenerateWeights,
    accelerated_step,
    anderson_weights,
)
from .consensus import (
    as_stacked,
    as_weights,
    complement_residual,
    consensus_mean,
    project_consensus,
    reflect_consensus,
    stack_copies,
    weighted_inner,
    weighted_norm,
)
from .experiments import (
    FederatedProblem,
    GenSpec,
    RoundMetrics,
    compute_metrics,
    desk_least_squares,
    desk_logistic,
    fedavg_fixed_point,
    fedprox_fixed_point,
    gen_least_squares,
    gen_logistic,
    generate,
    heterogeneity_measure,
    load_problem,
    oracle_logistic,
    save_problem,
    solve_global_ls,
    taylor_fixed_point,
)
from .losses import (
    CLOSED_FORM,
    GRADIENT_DESCENT,
    AbsoluteDeviation,
    Logistic,
    NegPartQuadratic,
    ProxSolverSpec,
    Quadratic,
    ScalarShiftedQuadratic,
    UserLoss,
)
from .scheme import (
    PRESET_NAMES,
    DualState,
    IterateState,
    LocalSolver,
    RngStreams,
    Schedule,
    SchemeParams,
    ergodic_average,
    fedpi_expanded_round,
    init_state,
    preset,
    round,
    run_scheme,
    sample_users,
)

__all__ = [
    "__version__",
    # losses
    "UserLoss", "Quadratic", "Logistic", "ScalarShiftedQuadratic",
    "AbsoluteDeviation", "NegPartQuadratic", "ProxSolverSpec",
    "CLOSED_FORM", "GRADIENT_DESCENT",
    # consensus
    "as_stacked", "as_weights", "stack_copies", "weighted_inner",
    "weighted_norm", "consensus_mean", "project_consensus",
    "reflect_consensus", "complement_residual",
    # scheme
    "Schedule", "LocalSolver", "SchemeParams", "IterateState", "DualState",
    "RngStreams", "PRESET_NAMES", "preset", "init_state", "round",
    "run_scheme", "fedpi_expanded_round", "ergodic_average", "sample_users",
    # anderson
    "AndersonConfig", "AndersonMemory", "DegenerateWeights",
    "anderson_weights", "accelerated_step",
    # experiments
    "FederatedProblem", "GenSpec", "RoundMetrics", "generate",
    "gen_least_squares", "gen_logistic", "desk_least_squares",
    "desk_logistic", "solve_global_ls", "oracle_logistic",
    "fedprox_fixed_point", "fedavg_fixed_point", "taylor_fixed_point",
    "heterogeneity_measure", "compute_metrics", "save_problem",
    "load_problem",
]
