"""Equivalence tests for dose-response curves of one or two binary endpoints."""

from doseequiv.bootstrap import (
    EquivalenceReport,
    TestConfig,
    bootstrap_quantile,
    bootstrap_replicates,
    p_value,
    test_bivariate,
    test_univ,
)
from doseequiv.datagen import (
    JointBernoulliSpec,
    RngStream,
    frechet_bounds,
    joint_cells_from_marginals,
    sample_gumbel,
    sample_univ,
)
from doseequiv.errors import (
    BootstrapWarning,
    ConfigError,
    ConstraintInfeasible,
    DataError,
    DoseEquivError,
    EmptyGroup,
    FeasibilityError,
    InfeasibleCorrelation,
    MalformedRow,
    MixedSchema,
    NonConvergence,
    SeparationWarning,
)
from doseequiv.estimation import (
    ConstrainedFitResult,
    FitResult,
    fit_constrained,
    fit_mle,
    fit_mle_gumbel,
    fit_mle_univ,
    select_null_params,
)
from doseequiv.model import (
    CountTable,
    DeviationResult,
    DoseDesign,
    GumbelParams,
    Kind,
    Link,
    LinkParams,
    check_feasibility,
    dose_grid,
    grad_loglik_gumbel,
    grad_loglik_univ,
    gumbel_cells,
    gumbel_correlation,
    gumbel_marginals,
    link_prob,
    loglik_gumbel,
    loglik_univ,
    max_abs_deviation,
    smooth_max,
    standard_design,
)

__version__ = "0.1.0"
