"""endiv: pivotal estimation and simultaneous inference for linear IV models
with many endogenous regressors and many instruments.

The pipeline has three steps: a self-normalized l1 fit of the full
coefficient vector, a per-coordinate orthogonalized-instrument fit, and a
closed-form debiased estimate per coordinate with multiplier-bootstrap
simultaneous confidence bands.  A sensitivity-coefficient analyzer and a
Monte Carlo harness complete the toolkit.
"""

__version__ = "0.1.0"

from .data import (
    Dataset,
    GroundTruth,
    PenaltyConfig,
    ValidationReport,
    load_dataset,
    save_dataset,
    validate,
)
from .errors import (
    BudgetError,
    ConfigError,
    DataError,
    EndivError,
    EstimationError,
    IdentificationError,
    ParseError,
    SchemaError,
    SolverError,
    ValidationError,
    WeakInstrumentError,
)
from .inference import (
    ConfidenceBand,
    DebiasedEstimate,
    debiased_coefficient,
    estimate_coefficient,
    multiplier_bootstrap,
    pointwise_interval,
    simultaneous_bands,
    variance_estimate,
)
from .sensitivity import (
    SensitivityReport,
    analyze_sensitivity,
    weak_instrument_bound,
    kappa_exact_small,
    kappa_lower_bound,
    sparse_singular_bounds,
)
from .simulate import (
    DgpParams,
    EstimatorConfig,
    MCSummary,
    generate_dgp,
    monte_carlo,
    oracle_clt_stats,
    population_instrument,
    run_replication,
)
from .solver import (
    AbsConstraint,
    ConvexProgram,
    MomentPair,
    ResidualMap,
    SolverSolution,
    residuals,
    solve,
)
from .stage1 import (
    Stage1Fit,
    check_feasibility,
    compute_H1n,
    default_penalties_stage1,
    fit_beta,
    refit_on_support,
)
from .stage2 import (
    OrthogonalInstrumentFit,
    Stage2Workspace,
    compute_H2n,
    default_penalties_stage2,
    fit_instrument,
    orthogonality_residuals,
)
