"""Loss functions, likelihoods and the multi-start quasi-Newton calibrator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.special import gammaln

from .domain import (CalibrationResult, FlowObservation, ModelSpec, ParameterVector,
                     TerritorySystem)
from .models import FlowPrediction, ModelError, predict

log = logging.getLogger(__name__)

PREDICTION_FLOOR = 1e-12
REL_LOSS_TOL = 1e-12


class CalibrationError(RuntimeError):
    pass


class NonPositivePrediction(CalibrationError, ArithmeticError):
    pass


class DegenerateVariance(CalibrationError, ArithmeticError):
    pass


class SingularInformation(CalibrationError, np.linalg.LinAlgError):
    pass


class NonFiniteLoss(CalibrationError):
    pass


class DidNotConverge(CalibrationError):
    """Raised only on request; ``minimize`` normally flags instead."""


def _values(x) -> np.ndarray:
    if isinstance(x, FlowPrediction):
        return x.values
    if isinstance(x, FlowObservation):
        return x.counts
    return np.asarray(x, dtype=float)


def _theta(params) -> np.ndarray:
    if params is None:
        return np.zeros(0)
    if isinstance(params, Mapping):
        return np.array([params[k] for k in params], dtype=float)
    return np.atleast_1d(np.asarray(params, dtype=float))


@dataclass(frozen=True)
class LossValue:
    data_term: float
    penalty: float
    total: float
    lam: float


def _penalised(data_term: float, params, lam: float) -> LossValue:
    theta = _theta(params)
    penalty = lam * float(theta @ theta)
    return LossValue(data_term, penalty, data_term + penalty, lam)


def gaussian_loss(prediction, observation, params=None, lam: float = 1.0) -> LossValue:
    """(1/2N) sum (data - model)^2 plus lam * |theta|^2."""
    model, data = _values(prediction), _values(observation)
    if model.shape != data.shape:
        raise ValueError("prediction and observation are not aligned")
    resid = data - model
    return _penalised(float(resid @ resid) / (2 * len(data)), params, lam)


def _floored(model: np.ndarray, data: np.ndarray) -> np.ndarray:
    low = model <= PREDICTION_FLOOR
    if np.any(low & (data > 0)):
        j = int(np.argmax(low & (data > 0)))
        raise NonPositivePrediction(
            f"model flow {model[j]!r} at destination {j} with {data[j]} observed lines")
    return np.where(low, PREDICTION_FLOOR, model)


def poisson_loss(prediction, observation, params=None, lam: float = 1.0) -> LossValue:
    """(1/N) sum (model - data log model) plus lam * |theta|^2."""
    model, data = _values(prediction), _values(observation)
    if model.shape != data.shape:
        raise ValueError("prediction and observation are not aligned")
    m = _floored(model, data)
    return _penalised(float(np.sum(m - data * np.log(m))) / len(data), params, lam)


def log_likelihood(prediction, observation, loss: str = "Poisson") -> float:
    """Maximised log-likelihood under the noise model behind ``loss``.

    Gaussian uses the profile variance sigma^2 = mean squared residual.
    """
    model, data = _values(prediction), _values(observation)
    if loss == "Poisson":
        m = _floored(model, data)
        return float(np.sum(data * np.log(m) - m - gammaln(data + 1.0)))
    if loss == "Gaussian":
        n = len(data)
        var = float(np.sum((data - model) ** 2)) / n
        if var <= 0:
            raise DegenerateVariance("zero residual variance")
        return -0.5 * n * (math.log(2 * math.pi * var) + 1.0)
    raise ValueError(f"unknown loss {loss!r}")


# --------------------------------------------------------------------------
# objective with analytic gradient
# --------------------------------------------------------------------------


class Objective:
    """Loss of one spec against one observation, as a function of theta."""

    def __init__(self, spec: ModelSpec, system: TerritorySystem,
                 observation: FlowObservation, lam: float = 1.0):
        self.spec = spec
        self.system = system
        self.data = observation.counts
        self.year = observation.year
        self.total = observation.total_outflow
        self.lam = lam
        self.n = len(self.data)

    def flows(self, theta, jacobian=False):
        return predict(self.spec, theta, self.system, self.year, self.total, jacobian)

    def data_term(self, theta) -> tuple[float, np.ndarray]:
        model, jac = self.flows(theta, jacobian=True)
        if self.spec.loss == "Gaussian":
            resid = self.data - model
            return float(resid @ resid) / (2 * self.n), -(resid @ jac) / self.n
        m = _floored(model, self.data)
        value = float(np.sum(m - self.data * np.log(m))) / self.n
        dm = np.where(model <= PREDICTION_FLOOR, 0.0, 1.0 - self.data / m)
        return value, (dm @ jac) / self.n

    def __call__(self, theta) -> tuple[float, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        value, grad = self.data_term(theta)
        return value + self.lam * float(theta @ theta), grad + 2 * self.lam * theta

    def loss(self, theta) -> LossValue:
        model, _ = self.flows(theta)
        fn = gaussian_loss if self.spec.loss == "Gaussian" else poisson_loss
        return fn(model, self.data, theta, self.lam)


# --------------------------------------------------------------------------
# quasi-Newton minimiser
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BFGSResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    converged: bool
    stalled: bool


def bfgs(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0, tol: float = 1e-8,
         max_iter: int = 10_000) -> BFGSResult:
    """BFGS on the inverse Hessian with Armijo backtracking.

    Stops when the gradient infinity-norm drops below ``tol`` or an accepted
    step changes the loss by less than 1e-12 relative.  Evaluation errors
    during the line search count as an infinite loss.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise NonFiniteLoss(f"non-finite loss at start {x}")
    n = len(x)
    eye = np.eye(n)
    H = eye.copy()
    fresh = True
    stalled = False
    converged = False
    k = 0
    while k < max_iter:
        if np.max(np.abs(g), initial=0.0) < tol:
            converged = True
            break
        p = -H @ g
        slope = float(g @ p)
        if slope >= 0:
            H, fresh = eye.copy(), True
            p = -g
            slope = float(g @ p)
        t = 1.0 if not fresh else min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300))
        while True:
            x_new = x + t * p
            try:
                f_new, g_new = fun(x_new)
            except (ModelError, CalibrationError, FloatingPointError, ValueError):
                f_new, g_new = math.inf, None
            if np.isfinite(f_new) and f_new <= f + 1e-4 * t * slope and np.all(np.isfinite(g_new)):
                break
            t *= 0.5
            if t * np.max(np.abs(p)) < 1e-16 * max(1.0, np.max(np.abs(x))):
                g_new = None
                break
        k += 1
        if g_new is None:
            if not fresh:
                H, fresh = eye.copy(), True
                continue
            stalled = True
            converged = True  # no representable decrease remains
            break
        s, y = x_new - x, g_new - g
        change = abs(f - f_new) / max(abs(f), abs(f_new), 1e-300)
        x, f, g = x_new, f_new, g_new
        sy = float(s @ y)
        if sy > 1e-300 and sy > 1e-12 * math.sqrt(float(s @ s) * float(y @ y)):
            if fresh:
                H = eye * (sy / float(y @ y))
                fresh = False
            rho = 1.0 / sy
            Hy = H @ y
            H = H + ((sy + y @ Hy) * rho * rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
        if change < REL_LOSS_TOL:
            converged = True
            break
    return BFGSResult(x, f, g, k, converged, stalled)


# --------------------------------------------------------------------------
# calibration driver
# --------------------------------------------------------------------------

START_GRID = (0.5, 1.0, 2.0)
RETAIL_BETA_STARTS = (0.001, 0.01, 0.1)


def default_starts(spec: ModelSpec) -> list[np.ndarray]:
    """Fixed start set; radiation values are positive and optimised in log space."""
    if spec.family in ("Gravity", "Radiation"):
        return [np.array([a, b]) for a in START_GRID for b in START_GRID]
    k = spec.n_params - 1
    return [np.concatenate([[beta], np.zeros(k)]) for beta in RETAIL_BETA_STARTS]


@dataclass(frozen=True)
class CalibrationOptions:
    lam: float = 1.0
    tolerance: float = 1e-8
    max_iter: int = 10_000
    starts: tuple | None = None
    std_errors: bool = True


def _to_free(spec: ModelSpec, theta: np.ndarray) -> np.ndarray:
    return np.log(theta) if spec.family == "Radiation" else theta.copy()


def _from_free(spec: ModelSpec, u: np.ndarray) -> np.ndarray:
    return np.exp(u) if spec.family == "Radiation" else u.copy()


def minimize(spec: ModelSpec, system: TerritorySystem, observation: FlowObservation,
             options: CalibrationOptions | None = None) -> CalibrationResult:
    """Best local minimum of the penalised loss over the fixed start grid."""
    options = options or CalibrationOptions()
    objective = Objective(spec, system, observation, options.lam)

    def free_fun(u):
        # overflowing trial points are rejected by the line search as infinite loss
        with np.errstate(over="ignore", invalid="ignore"):
            theta = _from_free(spec, u)
            f, g = objective(theta)
        if spec.family == "Radiation":
            g = g * theta
        return f, g

    starts = options.starts if options.starts is not None else default_starts(spec)
    runs: list[tuple[float, int, BFGSResult]] = []
    flat_candidates = []
    for i, start in enumerate(starts):
        theta0 = np.asarray(start, dtype=float)
        try:
            d0, dg0 = objective.data_term(theta0)
            run = bfgs(free_fun, _to_free(spec, theta0), options.tolerance, options.max_iter)
        except (NonFiniteLoss, ModelError, CalibrationError, FloatingPointError) as exc:
            log.info("spec %s: start %s skipped (%s)", spec.spec_id, theta0, exc)
            continue
        flat_candidates.append((d0, float(np.max(np.abs(dg0), initial=0.0))))
        runs.append((run.fun, i, run))
    if not runs:
        raise NonFiniteLoss(f"spec {spec.spec_id}: every start point failed")
    _, _, best = min(runs, key=lambda r: (r[0], r[1]))

    warnings = []
    d_values = [d for d, _ in flat_candidates]
    if all(gn < options.tolerance for _, gn in flat_candidates) and (
            max(d_values) - min(d_values) <= 1e-12 * max(1.0, abs(d_values[0]))):
        warnings.append("FlatObjective")
    if best.stalled:
        warnings.append("LineSearchStalled")
    if not best.converged:
        warnings.append("DidNotConverge")

    theta = _from_free(spec, best.x)
    params = ParameterVector.for_spec(spec, theta)
    model, _ = objective.flows(theta)
    try:
        loglik = log_likelihood(model, observation.counts, spec.loss)
    except CalibrationError:
        loglik = math.nan
    result = CalibrationResult(
        spec=spec, training_year=observation.year, params=params,
        std_errors=np.full(len(theta), np.nan), final_loss=best.fun, log_likelihood=loglik,
        iterations=best.iterations, converged=best.converged,
        grad_norm=float(np.max(np.abs(best.grad), initial=0.0)), warnings=tuple(warnings))
    if options.std_errors and best.converged:
        try:
            sigma = standard_errors(result, system, observation)
        except SingularInformation:
            result = _replace(result, warnings=result.warnings + ("SingularInformation",))
        else:
            result = _replace(result, std_errors=sigma)
    return result


def _replace(result: CalibrationResult, **changes) -> CalibrationResult:
    from dataclasses import replace
    return replace(result, **changes)


# --------------------------------------------------------------------------
# standard errors
# --------------------------------------------------------------------------

FD_STEP = 1e-5
SINGULAR_RCOND = 1e-9


def information_errors(grad: Callable[[np.ndarray], np.ndarray], theta,
                       step: float = FD_STEP) -> np.ndarray:
    """Standard errors from the inverse observed information.

    ``grad`` is the gradient of the negative log-likelihood; its Jacobian is
    taken by central differences with step ``step * max(1, |theta_k|)``.
    """
    theta = np.asarray(theta, dtype=float)
    k = len(theta)
    hess = np.empty((k, k))
    for i in range(k):
        h = step * max(1.0, abs(theta[i]))
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        try:
            hess[:, i] = (grad(up) - grad(down)) / (2 * h)
        except (ModelError, ValueError, FloatingPointError) as exc:
            # the stencil left the parameter domain: fit sits on its boundary
            raise SingularInformation(f"information undefined near {theta}: {exc}") from exc
    hess = 0.5 * (hess + hess.T)
    if not np.all(np.isfinite(hess)):
        raise SingularInformation("non-finite observed information")
    eig = np.linalg.eigvalsh(hess)
    if eig[0] <= SINGULAR_RCOND * max(abs(eig[-1]), 1e-300):
        raise SingularInformation(f"information eigenvalues {eig}")
    return np.sqrt(np.diag(np.linalg.inv(hess)))


def standard_errors(result: CalibrationResult, system: TerritorySystem,
                    observation: FlowObservation) -> np.ndarray:
    """Per-parameter sigma from the unpenalised training likelihood."""
    if not result.converged:
        raise DidNotConverge("standard errors need a converged fit")
    spec = result.spec
    objective = Objective(spec, system, observation, lam=0.0)
    theta = np.asarray(result.params.values, dtype=float)
    scale = float(objective.n)
    if spec.loss == "Gaussian":
        model, _ = objective.flows(theta)
        var = float(np.mean((observation.counts - model) ** 2))
        if var <= 0:
            raise SingularInformation("zero residual variance")
        # N * data_term = sum r^2 / 2; the likelihood divides that by sigma^2
        scale = objective.n / var

    def grad(t):
        return scale * objective.data_term(t)[1]

    return information_errors(grad, theta)
