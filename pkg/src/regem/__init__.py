"""Regression-based imputation of missing values in multivariate normal data."""

__version__ = "0.1.0"

from .closed_form import (
    ImputationSet,
    ImputedCell,
    build_ancova,
    impute_closed_form,
    monotone_bivariate_mle,
    solve_augmented_ols,
)
from .constraints import ConstraintSpec, VariableConstraint, constrained_nls, impute_with_total, mse, rmse
from .dataset import Dataset, MissingnessPattern, embedded_hald13, load_csv, loads_csv, validate
from .em import EmTrace, em_step, run_em
from .errors import (
    BootstrapError,
    ConstraintError,
    CSVParseError,
    DataError,
    RegemError,
    SingularSystemError,
)
from .multivar import (
    ConcatenatedSystem,
    NlsResult,
    alternating_solve,
    bivariate_directional,
    build_concatenated,
    solve_concatenated,
)
from .ols import OlsFit, fit_ols, leverage, neg2_loglik, predict_new, prediction_se
from .uncertainty import ImputationDraws, bootstrap_impute, multiple_impute, two_way_impute

__all__ = [
    "BootstrapError",
    "CSVParseError",
    "ConcatenatedSystem",
    "ConstraintError",
    "ConstraintSpec",
    "DataError",
    "Dataset",
    "EmTrace",
    "ImputationDraws",
    "ImputationSet",
    "ImputedCell",
    "MissingnessPattern",
    "NlsResult",
    "OlsFit",
    "RegemError",
    "SingularSystemError",
    "VariableConstraint",
    "alternating_solve",
    "bivariate_directional",
    "bootstrap_impute",
    "build_ancova",
    "build_concatenated",
    "constrained_nls",
    "em_step",
    "embedded_hald13",
    "fit_ols",
    "impute_closed_form",
    "impute_with_total",
    "leverage",
    "load_csv",
    "loads_csv",
    "monotone_bivariate_mle",
    "mse",
    "multiple_impute",
    "neg2_loglik",
    "predict_new",
    "prediction_se",
    "rmse",
    "run_em",
    "solve_augmented_ols",
    "solve_concatenated",
    "two_way_impute",
    "validate",
]
