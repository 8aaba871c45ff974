"""Query-based structure learning for sparse additive models with pairwise interactions."""
from .components import ComponentModel, estimate_components, fit_component, sample_component_grid, sup_error
from .hashing import HashFamily, build_hash_family, combined_hessian_grid, diagonal_grid, hessian_grid
from .model import (
    ComponentFunction,
    DomainError,
    GroundTruthModel,
    NoiseSpec,
    ProblemParams,
    QueryOracle,
    benchmark_problem,
    center_components,
    make_benchmark,
)
from .recovery import RecoveryConfig, RecoveryParams, SupportEstimate, recover_supports
from .sensing import draw_ensemble, sparse_recover

__version__ = "0.1.0"
