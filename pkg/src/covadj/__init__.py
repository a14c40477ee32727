"""Covariate-adjusted estimation of marginal treatment effects in two-arm randomized trials."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    ColumnSchema,
    EstimandSpec,
    ModelFormula,
    OutcomeKind,
    Scale,
    TrialDataset,
    load_dataset,
    make_dataset,
    validate_estimand,
)
from .estimators import ArmMeans, EstimatorConfig, Method, contrast, estimate  # noqa: E402
from .glm import Link, fit_glm  # noqa: E402
from .inference import (  # noqa: E402
    EstimateResult,
    VarianceMethod,
    analyze,
    bca_interval,
    bootstrap_variance,
    influence_variance,
    small_sample_correction,
)
from .missing import CovariateStrategy, ImputationPlan, OutcomeStrategy  # noqa: E402
from .simulation import (  # noqa: E402
    CovariateLaw,
    DGPSpec,
    Missingness,
    OutcomeModel,
    run_monte_carlo,
    true_estimands,
)
