"""Post-residualized weighting for generalizing experimental results."""

__version__ = "0.1.0"

from .data import (AnalysisSpec, ExperimentalSample, PopulationSample, ValidationReport, split_by_arm,
                   validate_pair)
from .diagnostics import (DiagnosticResult, all_diagnostics, proxy_error_decomposition,
                          pseudo_r2_covariate_crossfit, pseudo_r2_weighted, pseudo_r2_wls)
from .estimators import (METHODS, EstimateResult, all_estimates, covariate_adjusted_weighted,
                         covariate_adjusted_wls, difference_in_means, hajek_weighted, post_residualized_weighted,
                         post_residualized_wls, weighted_least_squares)
from .exceptions import (ColumnMismatch, DegenerateArm, EmptyFitSubset, Infeasible, InputError, NumericalError,
                         PoolTooSmall, PostresError, RankDeficient, Separation, ValidationError)
from .residualizer import FittedResidualizer, ResidualizerSpec, fit_residualizer, predict, predict_experiment
from .weights import WeightVector, entropy_balance, estimate_weights, fit_logistic_selection

__all__ = [name for name in dir() if not name.startswith("_")]
