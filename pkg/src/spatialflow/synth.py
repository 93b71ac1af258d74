"""Seeded synthetic systems and brute-force oracles for testing.

Randomness comes only from ``numpy.random.PCG64`` seeded explicitly, and
only through its uniform doubles; Poisson counts are drawn by inverse-CDF
so the streams do not depend on numpy's sampler internals.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import poisson

from .domain import (COVARIATES, CostMatrices, CovariateSet, FlowObservation, ModelSpec,
                     ParameterVector, Territory, TerritorySystem)
from .models import FlowPrediction, prediction_for

# Truth values match the magnitudes of the best published fits.
DEFAULT_TRUTH = {
    "Gravity": {"b": 0.697, "c": 0.368},
    "Radiation": {"rho": 2.085, "r": 1.038},
    "Retail": {"beta": 0.014, "alpha_knife_crime": -0.013},
}

DEFAULT_COVARIATE_RANGES = {
    "misuse_admissions": (2_000.0, 60_000.0),
    "poisoning_admissions": (1_000.0, 30_000.0),
    "police_workforce": (150.0, 450.0),
    "knife_crime": (10.0, 250.0),
    "gdhi": (15_000.0, 40_000.0),
}


@dataclass(frozen=True)
class SynthConfig:
    """Generation settings.

    Populations are drawn in millions of persons so that the radiation
    opportunity scale ``rho`` stays identifiable at values near 1.
    """

    territory_count: int = 38
    seed: int = 0
    years: tuple[int, ...] = (2019, 2020)
    region_km: float = 450.0
    minutes_per_km: float = 1.2
    population_range: tuple[float, float] = (0.05, 2.0)
    covariate_ranges: Mapping[str, tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_COVARIATE_RANGES))
    year_drift: float = 0.05
    truth: Mapping[str, Mapping[str, float]] = field(default_factory=lambda: dict(DEFAULT_TRUTH))


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _log_uniform(rng, low, high, size):
    return np.exp(np.log(low) + (np.log(high) - np.log(low)) * rng.random(size))


def generate_system(config: SynthConfig) -> TerritorySystem:
    """Planar random system; the origin is territory index 0."""
    n = config.territory_count
    if n < 2:
        raise ValueError("territory_count must be at least 2")
    rng = _rng(config.seed)
    xy = config.region_km * rng.random((n, 2))
    pops = _log_uniform(rng, *config.population_range, n)
    dist = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))
    width = max(2, len(str(n - 1)))
    territories = tuple(
        Territory(
            code=f"T{i:0{width}d}",
            name=f"Territory {i}",
            population=float(pops[i]),
            # rough degrees, for map exports only
            representative_point=(float(-3.0 + xy[i, 0] / 70.0), float(50.5 + xy[i, 1] / 111.0)),
        )
        for i in range(n)
    )
    base = np.column_stack([
        _log_uniform(rng, *config.covariate_ranges[c], n) for c in COVARIATES])
    covariates = {}
    for k, year in enumerate(config.years):
        if k == 0:
            values = base
        else:
            drift = 1.0 + config.year_drift * (2 * rng.random(base.shape) - 1)
            values = base * drift
        covariates[year] = CovariateSet(year, values)
    costs = CostMatrices(dist * config.minutes_per_km, dist)
    return TerritorySystem(territories, covariates, costs, origin_index=0)


def generate_flows(spec: ModelSpec | str, params: Mapping[str, float], system: TerritorySystem,
                   total_outflow: float, noise: str = "none", seed: int = 0,
                   year: int | None = None) -> FlowObservation:
    """Expected flows (rounded to 6 decimals) or independent Poisson draws."""
    if isinstance(spec, str):
        spec = ModelSpec(spec, "Poisson") if spec != "Retail" else ModelSpec.retail(
            "Poisson", [k[len("alpha_"):] for k in params if k.startswith("alpha_")])
    if year is None:
        year = system.years[0]
    params = ParameterVector.for_spec(spec, params)
    mean = prediction_for(spec, params, system, year, total_outflow).values
    if noise == "none":
        counts = np.round(mean, 6)
    elif noise == "poisson":
        u = _rng(seed).random(len(mean))
        counts = poisson.ppf(u, mean).astype(float)
    else:
        raise ValueError(f"unknown noise model {noise!r}")
    return FlowObservation(year, system.destination_codes, counts)


# --------------------------------------------------------------------------
# oracles
# --------------------------------------------------------------------------


def brute_force_radiation(system: TerritorySystem, rho: float, r: float,
                          total_outflow: float) -> FlowPrediction:
    """Direct nested-loop evaluation of the radiation split."""
    o = system.origin_index
    pops = [t.population for t in system.territories]
    dist = system.costs.distance
    probs = []
    for j in range(system.n):
        if j == o:
            continue
        between = 0.0
        for k in range(system.n):
            if k != o and k != j and dist[o][k] < dist[o][j]:
                between += pops[k]
        ni, nj, nij = rho * pops[o], rho * pops[j], rho * between
        top = math.pow(ni + nj + nij, r) - math.pow(ni + nij, r)
        bottom = (math.pow(ni + nij, r) + 1.0) * (math.pow(ni + nj + nij, r) + 1.0)
        probs.append(top * (math.pow(ni, r) + 1.0) / bottom)
    norm = sum(probs)
    flows = [total_outflow * p / norm for p in probs]
    return FlowPrediction(None, np.array(flows), "Radiation", system.destination_codes)


@dataclass(frozen=True)
class GridResult:
    params: ParameterVector
    loss: float
    evaluated: int


def grid_search(spec: ModelSpec, system: TerritorySystem, observation: FlowObservation,
                grid: Mapping[str, Sequence[float]] | Sequence[Sequence[float]],
                lam: float = 1.0) -> GridResult:
    """Exhaustive penalised-loss search; the first minimum in lexicographic order wins."""
    from .calibrate import CalibrationError, gaussian_loss, poisson_loss

    axes = [grid[k] for k in spec.param_names] if isinstance(grid, Mapping) else list(grid)
    if len(axes) != spec.n_params:
        raise ValueError(f"grid has {len(axes)} axes for {spec.n_params} parameters")
    loss_fn = gaussian_loss if spec.loss == "Gaussian" else poisson_loss
    total = observation.total_outflow
    best, best_loss, count = None, math.inf, 0
    for point in itertools.product(*axes):
        count += 1
        params = ParameterVector(spec.param_names, point)
        try:
            pred = prediction_for(spec, params, system, observation.year, total)
            value = loss_fn(pred, observation, params.values, lam).total
        except (ArithmeticError, ValueError, CalibrationError):
            continue
        if value < best_loss:
            best, best_loss = params, value
    if best is None:
        raise ValueError("no finite loss on the grid")
    return GridResult(best, best_loss, count)


# --------------------------------------------------------------------------
# CSV dump in the ingest formats
# --------------------------------------------------------------------------


def write_ingest_files(system: TerritorySystem, flows: Sequence[FlowObservation],
                       directory: str | Path, beds_seed: int = 1) -> dict[str, Path]:
    """Write territories/covariates/costs/flows/mapping CSVs that ingest back to ``system``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    rng = _rng(beds_seed)
    beds = 0.002 + 0.002 * rng.random(system.n)
    paths = {name: out / f"{name}.csv" for name in
             ("territories", "covariates", "costs", "flows", "mapping")}
    with open(paths["territories"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["code", "name", "lon", "lat", "population", "year"])
        for year in system.years:
            for t in system.territories:
                w.writerow([t.code, t.name, repr(t.representative_point[0]),
                            repr(t.representative_point[1]), repr(t.population), year])
    with open(paths["covariates"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["code", "year", "misuse_admissions", "poisoning_admissions", "police_fte",
                    "knife_crimes", "gdhi_total", "beds_per_capita"])
        for year, cov in system.covariates.items():
            for i, t in enumerate(system.territories):
                per100k = t.population / 1e5
                v = cov.values[i]
                row = [v[0] * beds[i] * per100k, v[1] * beds[i] * per100k, v[2] * per100k,
                       v[3] * per100k, v[4] * t.population, beds[i]]
                w.writerow([t.code, year] + [repr(float(x)) for x in row])
    with open(paths["costs"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin_code", "dest_code", "travel_time_min", "distance_km"])
        for i, a in enumerate(system.codes):
            for j, b in enumerate(system.codes):
                if i != j:
                    w.writerow([a, b, repr(float(system.costs.travel_time[i, j])),
                                repr(float(system.costs.distance[i, j]))])
    with open(paths["flows"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "dest_code", "lines"])
        for obs in flows:
            for code, c in zip(obs.codes, obs.counts):
                w.writerow([obs.year, code, int(c) if float(c).is_integer() else repr(float(c))])
    with open(paths["mapping"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["county_code", "police_code"])
        for code in system.codes:
            w.writerow([code, code])
    return paths
