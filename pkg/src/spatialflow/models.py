"""Singly constrained gravity, radiation and retail flow models.

All three families share one shape: each destination gets a positive
weight, and the origin's total outflow is split in proportion to those
weights.  Weights are handled as log-scores so the split is a softmax,
which keeps large exponents finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import expit

from .domain import COVARIATES, ModelSpec, TerritorySystem, _frozen


class ModelError(ArithmeticError):
    pass


class NonFiniteWeight(ModelError):
    pass


class DegenerateDenominator(ModelError):
    pass


@dataclass(frozen=True)
class FlowPrediction:
    year: int | None
    values: np.ndarray
    family: str
    codes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        object.__setattr__(self, "codes", tuple(self.codes))

    @property
    def total(self) -> float:
        return float(np.sum(self.values))


def _split(scores: np.ndarray, total: float, dscores: np.ndarray | None = None):
    """Softmax split of ``total`` over ``scores``; optionally the Jacobian."""
    if not np.all(np.isfinite(scores)):
        raise NonFiniteWeight("non-finite destination weight")
    w = np.exp(scores - scores.max())
    share = w / w.sum()
    flows = total * share
    if dscores is None:
        return flows, None
    centred = dscores - share @ dscores
    return flows, flows[:, None] * centred


# --------------------------------------------------------------------------
# gravity
# --------------------------------------------------------------------------


def _gravity_scores(b, c, system: TerritorySystem):
    dest = system.destinations
    log_m = np.log(system.populations[dest])
    log_d = np.log(system.costs.distance[system.origin_index, dest])
    with np.errstate(over="ignore", invalid="ignore"):  # caught by _split
        scores = b * log_m - c * log_d
    return scores, np.column_stack([log_m, -log_d])


def gravity_flows(params: Mapping[str, float], system: TerritorySystem,
                  total_outflow: float) -> FlowPrediction:
    """Split ``total_outflow`` in proportion to m_j^b / d_Lj^c."""
    scores, _ = _gravity_scores(params["b"], params["c"], system)
    flows, _ = _split(scores, total_outflow)
    return FlowPrediction(None, flows, "Gravity", system.destination_codes)


# --------------------------------------------------------------------------
# radiation
# --------------------------------------------------------------------------


def intervening_population(origin: int, dest: int, system: TerritorySystem) -> float:
    """Population strictly closer to ``origin`` than ``dest`` is, endpoints excluded."""
    if origin == dest:
        raise ValueError("origin and destination coincide")
    d = system.costs.distance[origin]
    mask = d < d[dest]
    mask[[origin, dest]] = False
    return float(system.populations[mask].sum())


def intervening_populations(system: TerritorySystem) -> np.ndarray:
    """Vectorised ``intervening_population`` for every destination."""
    o = system.origin_index
    d = system.costs.distance[o]
    dest = system.destinations
    closer = d[None, :] < d[dest][:, None]
    closer[:, o] = False
    return closer.astype(float) @ system.populations


def radiation_probability(n_i: float, n_j: float, n_ij: float, r: float) -> float:
    """Absorption probability for opportunities (n_i, n_j, n_ij) and exponent r."""
    if r <= 0:
        raise ValueError("r must be positive")
    inner = (n_i + n_ij) ** r
    outer = (n_i + n_j + n_ij) ** r
    return (outer - inner) * (n_i ** r + 1.0) / ((inner + 1.0) * (outer + 1.0))


def _radiation_scores(rho, r, system: TerritorySystem):
    if not (rho > 0 and r > 0):
        raise ValueError("rho and r must be positive")
    p = system.populations
    dest = system.destinations
    n_o = rho * p[system.origin_index]
    n_j = rho * p[dest]
    n_between = rho * intervening_populations(system)

    log_a = np.log(n_o + n_between)
    log_b = np.log(n_o + n_between + n_j)
    log_c = np.log(n_o)
    A, B, C = r * log_a, r * log_b, r * log_c
    gap = -np.expm1(A - B)  # 1 - (a/b)^r
    with np.errstate(divide="ignore"):
        scores = (B + np.log(gap) + np.logaddexp(C, 0.0)
                  - np.logaddexp(A, 0.0) - np.logaddexp(B, 0.0))
    if np.all(scores == -np.inf):
        raise DegenerateDenominator("every absorption probability vanished")
    sA, sB, sC = expit(A), expit(B), expit(C)
    d_rho = (r / rho) * (1.0 + sC - sA - sB) * np.ones_like(scores)
    ratio = np.exp(A - B) / gap
    d_r = (log_b + ratio * (log_b - log_a)) + sC * log_c - sA * log_a - sB * log_b
    return scores, np.column_stack([d_rho, d_r])


def radiation_flows(params: Mapping[str, float], system: TerritorySystem,
                    total_outflow: float) -> FlowPrediction:
    """Radiation split with opportunities n = rho * population."""
    scores, _ = _radiation_scores(params["rho"], params["r"], system)
    if np.any(scores == -np.inf):
        # a zero-probability destination: drop it from the softmax explicitly
        finite = scores > -np.inf
        flows = np.zeros_like(scores)
        flows[finite], _ = _split(scores[finite], total_outflow)
    else:
        flows, _ = _split(scores, total_outflow)
    return FlowPrediction(None, flows, "Radiation", system.destination_codes)


# --------------------------------------------------------------------------
# retail
# --------------------------------------------------------------------------


def _retail_scores(beta, alphas, covariates, system: TerritorySystem, year: int):
    dest = system.destinations
    cost = system.costs.travel_time[system.origin_index, dest]
    cov = system.covariates[year]
    cols = [COVARIATES.index(c) for c in covariates]
    log_w = np.log(cov.values[np.ix_(dest, cols)])
    with np.errstate(over="ignore", invalid="ignore"):  # caught by _split
        scores = log_w @ np.asarray(alphas, dtype=float) - beta * cost
    return scores, np.column_stack([-cost, log_w])


def retail_flows(params: Mapping[str, float], system: TerritorySystem, covariate_year: int,
                 total_outflow: float) -> FlowPrediction:
    """Entropy-maximising split: exp(sum_n alpha_n log w_j^(n) - beta c_Lj)."""
    covs = [c for c in COVARIATES if f"alpha_{c}" in params]
    alphas = [params[f"alpha_{c}"] for c in covs]
    scores, _ = _retail_scores(params["beta"], alphas, covs, system, covariate_year)
    flows, _ = _split(scores, total_outflow)
    return FlowPrediction(covariate_year, flows, "Retail", system.destination_codes)


# --------------------------------------------------------------------------
# dispatch used by the calibrator
# --------------------------------------------------------------------------


def predict(spec: ModelSpec, theta, system: TerritorySystem, year: int | None,
            total_outflow: float, jacobian: bool = False):
    """Flows for ``spec`` at parameter array ``theta`` (order ``spec.param_names``).

    Returns ``(flows, J)`` with ``J[j, k] = d flows_j / d theta_k`` when
    ``jacobian`` is set, else ``(flows, None)``.
    """
    theta = np.asarray(theta, dtype=float)
    if spec.family == "Gravity":
        scores, ds = _gravity_scores(theta[0], theta[1], system)
    elif spec.family == "Radiation":
        scores, ds = _radiation_scores(theta[0], theta[1], system)
        if np.any(scores == -np.inf):
            raise NonFiniteWeight("zero absorption probability at a destination")
    else:
        scores, ds = _retail_scores(theta[0], theta[1:], spec.covariates, system, year)
    return _split(scores, total_outflow, ds if jacobian else None)


def prediction_for(spec: ModelSpec, params: Mapping[str, float], system: TerritorySystem,
                   year: int | None, total_outflow: float) -> FlowPrediction:
    if spec.family == "Gravity":
        pred = gravity_flows(params, system, total_outflow)
    elif spec.family == "Radiation":
        pred = radiation_flows(params, system, total_outflow)
    else:
        return retail_flows(params, system, year, total_outflow)
    return FlowPrediction(year, pred.values, pred.family, pred.codes)
