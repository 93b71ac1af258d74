"""Model comparison: similarity, information criteria, cross-validation, ranking."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .calibrate import (CalibrationError, CalibrationOptions, NonPositivePrediction,
                        log_likelihood, minimize)
from .domain import (COVARIATES, CalibrationResult, Dataset, EvaluationReport,
                     FlowObservation, ModelSpec, ParameterVector, TerritorySystem)
from .models import FlowPrediction, ModelError, prediction_for

log = logging.getLogger(__name__)


class BothEmpty(ValueError):
    pass


class EmptyObservation(ValueError):
    pass


def _values(x) -> np.ndarray:
    if isinstance(x, FlowPrediction):
        return x.values
    if isinstance(x, FlowObservation):
        return x.counts
    return np.asarray(x, dtype=float)


def sorensen_dice(observation, prediction) -> float:
    data, model = _values(observation), _values(prediction)
    if data.shape != model.shape:
        raise ValueError("observation and prediction are not aligned")
    denom = data.sum() + model.sum()
    if denom == 0:
        raise BothEmpty("both vectors are empty")
    return float(min(1.0, 2.0 * np.minimum(data, model).sum() / denom))


def bic(sample_size: int, log_likelihood: float) -> float:
    """2 log M - 2 log L, as used throughout the comparison figures."""
    if sample_size < 1:
        raise ValueError("sample size must be positive")
    return 2.0 * math.log(sample_size) - 2.0 * log_likelihood


def bic_textbook(sample_size: int, log_likelihood: float, n_params: int) -> float:
    """Standard k log M - 2 log L, for sensitivity comparisons only."""
    if sample_size < 1:
        raise ValueError("sample size must be positive")
    return n_params * math.log(sample_size) - 2.0 * log_likelihood


class LogMSE(NamedTuple):
    mse: float
    excluded: int


def log_mse(observation, prediction) -> LogMSE:
    """Mean squared difference of natural logs; zero-count destinations are skipped."""
    data, model = _values(observation), _values(prediction)
    if data.shape != model.shape:
        raise ValueError("observation and prediction are not aligned")
    keep = data > 0
    if np.any(model[keep] <= 0):
        raise NonPositivePrediction("model flow must be positive where lines were observed")
    excluded = int(np.count_nonzero(~keep))
    if not keep.any():
        return LogMSE(math.nan, excluded)
    diff = np.log(data[keep]) - np.log(model[keep])
    return LogMSE(float(np.mean(diff * diff)), excluded)


def concentration_share(observation: FlowObservation, subset: Iterable[str]) -> float:
    subset = set(subset)
    unknown = subset - set(observation.codes)
    if unknown:
        raise KeyError(f"codes not among destinations: {sorted(unknown)}")
    total = observation.total_outflow
    if total <= 0:
        raise EmptyObservation(f"no lines observed in {observation.year}")
    picked = sum(c for code, c in zip(observation.codes, observation.counts) if code in subset)
    return float(picked / total)


# --------------------------------------------------------------------------
# the 68 specifications
# --------------------------------------------------------------------------

# Covariate subsets (1-based) in the published listing order.  Rows 28-30
# do not follow lexicographic order there, so the table is spelled out.
RETAIL_SUBSETS: tuple[tuple[int, ...], ...] = (
    (),
    (1,), (2,), (3,), (4,), (5,),
    (1, 2), (1, 3), (1, 4), (1, 5), (2, 3), (2, 4), (2, 5), (3, 4), (3, 5), (4, 5),
    (1, 2, 3), (1, 2, 4), (1, 2, 5), (1, 3, 4), (1, 3, 5), (2, 3, 4), (2, 3, 5),
    (3, 4, 5), (2, 4, 5), (1, 4, 5),
    (1, 2, 3, 4), (1, 2, 3, 5), (1, 2, 4, 5), (1, 3, 4, 5), (2, 3, 4, 5),
    (1, 2, 3, 4, 5),
)


def enumerate_models() -> list[ModelSpec]:
    specs = [
        ModelSpec("Gravity", "Gaussian", spec_id=1),
        ModelSpec("Gravity", "Poisson", spec_id=2),
        ModelSpec("Radiation", "Gaussian", spec_id=3),
        ModelSpec("Radiation", "Poisson", spec_id=4),
    ]
    for loss in ("Poisson", "Gaussian"):
        for subset in RETAIL_SUBSETS:
            mask = tuple(i + 1 in subset for i in range(len(COVARIATES)))
            specs.append(ModelSpec("Retail", loss, mask, spec_id=len(specs) + 1))
    return specs


def spec_by_id(spec_id: int) -> ModelSpec:
    specs = enumerate_models()
    if not 1 <= spec_id <= len(specs):
        raise KeyError(f"no model with id {spec_id}")
    return specs[spec_id - 1]


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------

Predictor = Callable[[CalibrationResult, TerritorySystem, FlowObservation], FlowPrediction]


def predict_year(result: CalibrationResult, system: TerritorySystem,
                 observation: FlowObservation) -> FlowPrediction:
    """Prediction for ``observation``'s year, constrained by its own total outflow."""
    return prediction_for(result.spec, result.params, system, observation.year,
                          observation.total_outflow)


def _pooled_loglik(spec: ModelSpec, data: np.ndarray, model: np.ndarray) -> float:
    return log_likelihood(model, data, spec.loss)


def cross_validate(spec: ModelSpec, system: TerritorySystem,
                   observations: Mapping[int, FlowObservation],
                   options: CalibrationOptions | None = None, train_year: int | None = None,
                   predictor: Predictor = predict_year,
                   fitter: Callable = minimize) -> EvaluationReport:
    """Two-fold year-wise cross-validation of one spec.

    Each year is fitted and the other year scored with Sorensen-Dice.  The
    reported parameters, BIC and log-MSE come from the ``train_year`` fit
    (default: the earlier year), scored over both years pooled.
    """
    if len(observations) != 2:
        raise ValueError("cross-validation needs exactly two yearly observations")
    years = sorted(observations)
    train_year = years[0] if train_year is None else train_year
    if train_year not in observations:
        raise ValueError(f"no observations for training year {train_year}")

    fits = {y: fitter(spec, system, observations[y], options) for y in years}
    s_per_fold = {}
    for y in years:
        held_out = years[1] if y == years[0] else years[0]
        pred = predictor(fits[y], system, observations[held_out])
        s_per_fold[held_out] = sorensen_dice(observations[held_out], pred)

    fit = fits[train_year]
    preds = [predictor(fit, system, observations[y]) for y in years]
    data = np.concatenate([observations[y].counts for y in years])
    model = np.concatenate([p.values for p in preds])
    try:
        pooled = _pooled_loglik(spec, data, model)
    except (CalibrationError, ArithmeticError):
        pooled = math.nan
    m = len(data)
    lm = log_mse(data, model)
    return EvaluationReport(
        spec=spec,
        train_year=train_year,
        params=fit.params,
        std_errors=fit.std_errors,
        s_per_fold=s_per_fold,
        s_mean=(s_per_fold[years[0]] + s_per_fold[years[1]]) / 2,
        bic=bic(m, pooled),
        bic_fold=bic(observations[train_year].n, fit.log_likelihood),
        bic_textbook=bic_textbook(m, pooled, spec.n_params),
        log_mse=lm.mse,
        log_mse_excluded=lm.excluded,
        fits=fits,
    )


def failed_report(spec: ModelSpec, years: Sequence[int], train_year: int,
                  reason: str) -> EvaluationReport:
    nan = math.nan
    return EvaluationReport(
        spec=spec, train_year=train_year,
        params=ParameterVector(spec.param_names, [nan] * spec.n_params),
        std_errors=np.full(spec.n_params, nan), s_per_fold={y: nan for y in years},
        s_mean=nan, bic=nan, bic_fold=nan, bic_textbook=nan, log_mse=nan,
        log_mse_excluded=0, status=f"error: {reason}")


# --------------------------------------------------------------------------
# ranking
# --------------------------------------------------------------------------

RANK_KEYS = ("bic", "s_mean", "log_mse")


@dataclass(frozen=True)
class RankingTable:
    reports: tuple[EvaluationReport, ...]
    key: str
    tie_break: str = "n_params"

    def __iter__(self):
        return iter(self.reports)

    def __len__(self):
        return len(self.reports)

    def __getitem__(self, i):
        return self.reports[i]


def rank_models(reports: Sequence[EvaluationReport], key: str = "bic") -> RankingTable:
    """Ascending BIC/log-MSE or descending mean S; undefined values go last.

    Ties fall to fewer free parameters, then spec id.
    """
    if key not in RANK_KEYS:
        raise ValueError(f"unknown ranking key {key!r}")
    if not reports:
        raise ValueError("nothing to rank")
    sign = -1.0 if key == "s_mean" else 1.0

    def order(rep: EvaluationReport):
        value = getattr(rep, key)
        missing = value is None or math.isnan(value)
        return (missing, 0.0 if missing else sign * value, rep.spec.n_params,
                rep.spec.spec_id, rep.train_year)

    ordered = sorted(reports, key=order)
    return RankingTable(tuple(replace(r, rank=i + 1) for i, r in enumerate(ordered)), key)


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------


def _evaluate(job) -> EvaluationReport:
    spec, dataset, options, train_year = job
    try:
        return cross_validate(spec, dataset.system, dataset.flows, options, train_year)
    except (CalibrationError, ModelError, ArithmeticError, ValueError) as exc:
        log.warning("spec %d failed: %s", spec.spec_id, exc)
        return failed_report(spec, dataset.years, train_year, f"{type(exc).__name__}: {exc}")


def run_pipeline(dataset: Dataset, specs: Sequence[ModelSpec] | None = None,
                 options: CalibrationOptions | None = None, train_year: int | None = None,
                 jobs: int = 1) -> list[EvaluationReport]:
    """Cross-validate every spec; results are in spec-id order regardless of ``jobs``."""
    specs = list(specs) if specs is not None else enumerate_models()
    years = dataset.years
    train_year = years[0] if train_year is None else train_year
    work = [(s, dataset, options, train_year) for s in sorted(specs, key=lambda s: s.spec_id)]
    if jobs > 1 and len(work) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_evaluate, work))
    return [_evaluate(job) for job in work]
