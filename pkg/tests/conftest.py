from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from spatialflow.domain import (COVARIATES, CostMatrices, CovariateSet, FlowObservation,
                                Territory, TerritorySystem)

FIXTURES = Path(__file__).parent / "fixtures"


def line_system(positions, populations, covariates=None, years=(2019,), minutes_per_km=1.0):
    """Territories on a line; index 0 is the origin.

    ``covariates`` is an (n, 5) array reused for every year (ones by default).
    """
    x = np.asarray(positions, dtype=float)
    n = len(x)
    dist = np.abs(x[:, None] - x[None, :])
    territories = tuple(
        Territory(f"T{i}", f"Place {i}", float(p), (float(x[i]), 0.0))
        for i, p in enumerate(populations))
    cov = np.ones((n, len(COVARIATES))) if covariates is None else np.asarray(covariates, float)
    return TerritorySystem(
        territories, {y: CovariateSet(y, cov) for y in years},
        CostMatrices(dist * minutes_per_km, dist), origin_index=0)


def observation(system, counts, year=2019):
    return FlowObservation(year, system.destination_codes, np.asarray(counts, dtype=float))


@pytest.fixture
def tiny3_dir():
    return FIXTURES / "tiny3"


@pytest.fixture
def synth10_dir():
    return FIXTURES / "synth10"
