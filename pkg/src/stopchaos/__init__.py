"""stopchaos: chaos expansions for boundary-weighted functionals of stopped Brownian paths.

The library covers the full pipeline: closed-form domain data (interval and
half-line models of killed Brownian motion under a boundary-tilted measure),
the associated semigroup operators on quadrature grids, the expansion kernels
and their weighted L2 masses, path simulation under the Wiener / tilted /
survival-conditioned measures, and Monte Carlo evaluation of the iterated
stochastic integrals that verify the expansion's isometry and orthogonality.

See the demos/ directory for narrative walkthroughs and the ``stopchaos``
CLI (``verify``, ``kernels``, ``simulate``, ``expand``) for the file-based
interface.
"""

from .domains import DomainError, HalfLineDomain, IntervalDomain, domain_from_json, domain_to_json
from .grids import GridFunction, QuadratureGrid
from .operators import BoundaryDataError, SemigroupOperators
from .kernels import ChaosKernel, SimplexQuadrature, parseval_tail_bound, parseval_term
from .paths import (
    PathSample,
    RngStream,
    TimeGrid,
    increments_hat,
    increments_w_tilde,
    simulate_P,
    simulate_Q,
    simulate_Qt,
)
from .tables import KernelTables
from .expansion import (
    IteratedIntegralValue,
    MCConfig,
    MCEstimate,
    clark_residual,
    eq1_check,
    expansion_partial_sum,
    iterated_integral,
    orthogonality_estimate,
    run_expansion_study,
)
from .config import ConfigError, ExperimentConfig
from .verify import ReportRecord, run_verify

__version__ = "0.1.0"

__all__ = [
    "DomainError",
    "IntervalDomain",
    "HalfLineDomain",
    "domain_from_json",
    "domain_to_json",
    "QuadratureGrid",
    "GridFunction",
    "BoundaryDataError",
    "SemigroupOperators",
    "ChaosKernel",
    "SimplexQuadrature",
    "parseval_term",
    "parseval_tail_bound",
    "TimeGrid",
    "RngStream",
    "PathSample",
    "simulate_P",
    "simulate_Q",
    "simulate_Qt",
    "increments_w_tilde",
    "increments_hat",
    "KernelTables",
    "MCConfig",
    "MCEstimate",
    "IteratedIntegralValue",
    "iterated_integral",
    "run_expansion_study",
    "expansion_partial_sum",
    "orthogonality_estimate",
    "clark_residual",
    "eq1_check",
    "ExperimentConfig",
    "ConfigError",
    "ReportRecord",
    "run_verify",
    "__version__",
]
