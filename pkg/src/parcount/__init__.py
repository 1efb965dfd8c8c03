"""Poisson autoregressive models for count series with covariates.

The main entry points are :func:`fit_par_hybrid` (single series),
:func:`fit_multi_par` (several series with shared coefficients),
:func:`fit_par_filter_mle` (likelihood comparator) and the Monte Carlo
driver :func:`run_scenario`.
"""

from .baseline import BaselineConfig, BaselineFit, fit_par_filter_mle, negbin_predictive_loglik
from .glm import GlmFit, SingularDesignError, fit_poisson_log_link
from .harness import ScenarioReport, ScenarioSpec, relative_bias, run_scenario, run_table
from .hybrid import HybridConfig, ParFit, estimate_rho_from_spline, fit_par_hybrid, one_step_means
from .metrics import FitMetrics, compute_metrics
from .model import (
    CountSeries,
    CovariatePanel,
    DomainError,
    MeanPath,
    MultiParParams,
    NonStationaryError,
    ParParams,
    StructuralChangeSpec,
    dynamic_mean,
    dynamic_mean_additive,
    simulate_multi_par,
    simulate_par,
    simulate_par_with_change,
)
from .multi import MultiParConfig, MultiParFit, fit_multi_par
from .spline import SplineFit, fit_smoothing_spline

__all__ = [
    "BaselineConfig",
    "BaselineFit",
    "CountSeries",
    "CovariatePanel",
    "DomainError",
    "FitMetrics",
    "GlmFit",
    "HybridConfig",
    "MeanPath",
    "MultiParConfig",
    "MultiParFit",
    "MultiParParams",
    "NonStationaryError",
    "ParFit",
    "ParParams",
    "ScenarioReport",
    "ScenarioSpec",
    "SingularDesignError",
    "SplineFit",
    "StructuralChangeSpec",
    "compute_metrics",
    "dynamic_mean",
    "dynamic_mean_additive",
    "estimate_rho_from_spline",
    "fit_multi_par",
    "fit_par_filter_mle",
    "fit_par_hybrid",
    "fit_poisson_log_link",
    "fit_smoothing_spline",
    "negbin_predictive_loglik",
    "one_step_means",
    "relative_bias",
    "run_scenario",
    "run_table",
    "simulate_multi_par",
    "simulate_par",
    "simulate_par_with_change",
]
