"""Online (robust) matrix completion on graphs.

Streaming reconstruction of partially observed vectors that lie near a
low-dimensional subspace, with a graph Laplacian smoothing penalty over the
vector components and an optional sparse-outlier estimate per sample.
"""

from graphmc.errors import (
    ConvergenceError,
    DimensionError,
    GraphValidationError,
    UnsupportedModeError,
)
from graphmc.graph import (
    GraphLaplacian,
    WeightedGraph,
    build_laplacian,
    laplacian_sqrt,
    smoothness,
)
from graphmc.solvers import (
    SolverConfig,
    SubspaceSystemOperator,
    apply_operator,
    solve_subspace,
    solve_sylvester,
)
from graphmc.tracker import (
    AccumulatorSet,
    Hyperparameters,
    OnlineTracker,
    StreamSample,
    SubspaceState,
    compute_coefficients,
    init_state,
    step,
    update_accumulators,
    update_subspace,
)
from graphmc.robust import (
    LassoProblem,
    RobustStepResult,
    RobustTracker,
    assemble_lasso,
    compute_robust_coefficients,
    robust_step,
    solve_lasso,
)

__version__ = "0.1.0"

__all__ = [
    "AccumulatorSet",
    "ConvergenceError",
    "DimensionError",
    "GraphLaplacian",
    "GraphValidationError",
    "Hyperparameters",
    "LassoProblem",
    "OnlineTracker",
    "RobustStepResult",
    "RobustTracker",
    "SolverConfig",
    "StreamSample",
    "SubspaceState",
    "SubspaceSystemOperator",
    "UnsupportedModeError",
    "WeightedGraph",
    "apply_operator",
    "assemble_lasso",
    "build_laplacian",
    "compute_coefficients",
    "compute_robust_coefficients",
    "init_state",
    "laplacian_sqrt",
    "robust_step",
    "smoothness",
    "solve_lasso",
    "solve_subspace",
    "solve_sylvester",
    "step",
    "update_accumulators",
    "update_subspace",
]
