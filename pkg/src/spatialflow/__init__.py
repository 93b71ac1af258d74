"""Calibration and selection of single-origin spatial interaction models."""

__version__ = "0.1.0"

from .calibrate import (CalibrationOptions, gaussian_loss, log_likelihood, minimize,
                        poisson_loss, standard_errors)
from .domain import (COVARIATES, CalibrationResult, Dataset, EvaluationReport, FlowObservation,
                     ModelSpec, ParameterVector, Territory, TerritorySystem, validate_system)
from .models import (FlowPrediction, gravity_flows, intervening_population,
                     radiation_flows, radiation_probability, retail_flows)
from .select import (bic, concentration_share, cross_validate, enumerate_models, log_mse,
                     rank_models, sorensen_dice)

__all__ = [
    "COVARIATES", "CalibrationOptions", "CalibrationResult", "Dataset", "EvaluationReport",
    "FlowObservation", "FlowPrediction", "ModelSpec", "ParameterVector", "Territory",
    "TerritorySystem", "bic", "concentration_share", "cross_validate", "enumerate_models",
    "gaussian_loss", "gravity_flows", "intervening_population", "log_likelihood", "log_mse",
    "minimize", "poisson_loss", "radiation_flows", "radiation_probability", "rank_models",
    "retail_flows", "sorensen_dice", "standard_errors", "validate_system",
]
