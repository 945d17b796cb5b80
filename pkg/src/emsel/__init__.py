"""Selective inference for treatment-effect modification after lasso selection."""

__version__ = "0.1.0"

from .dataset import ColumnSchema, Dataset, DesignSpec, center_columns, expand_interactions, load_csv
from .errors import EmselError, NumericalError, ValidationError
from .lasso import KKT_SCALE, LassoFit, choose_lambda, estimate_sigma, relaxed_fit, solve_lasso
from .nuisance import (ForestParams, NuisanceFit, OracleNuisance, cross_fit, estimate_nuisance,
                       fit_lasso_cv, fit_random_forest, zero_nuisance)
from .pivot import (AnalysisConfig, ReportRow, SelectiveReport, invert_pivot, selective_analysis,
                    selective_pvalue, snooping_analysis, truncated_normal_cdf)
from .robinson import (FixedModelInference, TransformedRegression, estimate_ate,
                       fixed_model_inference, naive_linear_model, target_beta_star, transform,
                       univariate_screening)
from .selection import SelectionEvent, TruncationInterval, build_event, diagnostics, truncation_interval
from .simulation import (PerturbationResult, SimConfig, SimMetrics, compose_sparse,
                         functional_form, generate_dataset, perturbation_experiment,
                         population_ate, run_replication, run_study)

__all__ = [name for name in dir() if not name.startswith("_")]
