"""Multivariate latent growth models for mixed binomial/normal panels, fitted by EM."""

from .diagnostics import (
    correlation_discrepancies,
    gf_bootstrap_null,
    gf_fit_margins,
    implied_predictor_covariance,
    information_criteria,
    standardized_loadings,
)
from .em import FitOptions, FitResult, fit, initialize, standard_errors
from .errors import InputError, LatgrowthError, NumericalError
from .model import Item, ModelSpec, PanelDataset, ParameterSet, design_row, linear_predictor, validate
from .quadrature import build_grid, gauss_hermite_rule, marginal_loglik, posterior_weights
from .simulate import SimConfig, simulate_dataset

__all__ = [
    "FitOptions",
    "FitResult",
    "InputError",
    "Item",
    "LatgrowthError",
    "ModelSpec",
    "NumericalError",
    "PanelDataset",
    "ParameterSet",
    "SimConfig",
    "build_grid",
    "correlation_discrepancies",
    "design_row",
    "fit",
    "gauss_hermite_rule",
    "gf_bootstrap_null",
    "gf_fit_margins",
    "implied_predictor_covariance",
    "information_criteria",
    "initialize",
    "linear_predictor",
    "marginal_loglik",
    "posterior_weights",
    "simulate_dataset",
    "standard_errors",
    "standardized_loadings",
    "validate",
]
