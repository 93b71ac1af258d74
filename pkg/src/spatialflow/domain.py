"""Core data types for single-origin flow modelling.

Every array held by these types is made read-only on construction, so a
validated dataset can be shared freely between workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

COVARIATES: tuple[str, ...] = (
    "misuse_admissions",
    "poisoning_admissions",
    "police_workforce",
    "knife_crime",
    "gdhi",
)

FAMILIES = ("Gravity", "Radiation", "Retail")
LOSSES = ("Gaussian", "Poisson")


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


# --------------------------------------------------------------------------
# violations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    """One broken invariant. ``kind`` is the class name."""

    message: str

    @property
    def kind(self) -> str:
        return type(self).__name__

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        out.update({k: v for k, v in self.__dict__.items()})
        return out

    def __str__(self) -> str:
        return f"{self.kind}: {self.message}"


@dataclass(frozen=True)
class NonPositiveCovariate(Violation):
    territory: str = ""
    covariate: str = ""


@dataclass(frozen=True)
class NonPositivePopulation(Violation):
    territory: str = ""


@dataclass(frozen=True)
class DimensionMismatch(Violation):
    pass


@dataclass(frozen=True)
class UnknownYear(Violation):
    year: int = 0


@dataclass(frozen=True)
class NegativeCount(Violation):
    territory: str = ""
    year: int = 0


@dataclass(frozen=True)
class DuplicateTerritory(Violation):
    territory: str = ""


@dataclass(frozen=True)
class InvalidCost(Violation):
    pass


@dataclass(frozen=True)
class InvalidOrigin(Violation):
    pass


class ValidationError(ValueError):
    """Raised with every violation found, not only the first."""

    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


# --------------------------------------------------------------------------
# territories and system
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Territory:
    code: str
    name: str
    population: float
    representative_point: tuple[float, float]  # (lon, lat)


@dataclass(frozen=True)
class CovariateSet:
    """Covariate values for one year, shape (n_territories, 5) in COVARIATES order."""

    year: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))

    def column(self, name: str) -> np.ndarray:
        return self.values[:, COVARIATES.index(name)]


@dataclass(frozen=True)
class CostMatrices:
    travel_time: np.ndarray  # minutes
    distance: np.ndarray  # kilometres

    def __post_init__(self):
        object.__setattr__(self, "travel_time", _frozen(self.travel_time))
        object.__setattr__(self, "distance", _frozen(self.distance))


@dataclass(frozen=True)
class TerritorySystem:
    territories: tuple[Territory, ...]
    covariates: Mapping[int, CovariateSet]
    costs: CostMatrices
    origin_index: int

    def __post_init__(self):
        object.__setattr__(self, "territories", tuple(self.territories))
        object.__setattr__(
            self, "covariates", {int(y): c for y, c in sorted(self.covariates.items())}
        )

    @property
    def n(self) -> int:
        return len(self.territories)

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(t.code for t in self.territories)

    @property
    def populations(self) -> np.ndarray:
        return _frozen([t.population for t in self.territories])

    @property
    def origin(self) -> Territory:
        return self.territories[self.origin_index]

    @property
    def destinations(self) -> np.ndarray:
        """Indices of every territory except the origin, in system order."""
        return _frozen([i for i in range(self.n) if i != self.origin_index], dtype=int)

    @property
    def destination_codes(self) -> tuple[str, ...]:
        return tuple(self.codes[i] for i in self.destinations)

    @property
    def years(self) -> tuple[int, ...]:
        return tuple(self.covariates)

    def index_of(self, code: str) -> int:
        try:
            return self.codes.index(code)
        except ValueError:
            raise KeyError(code) from None

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "territories": [
                {
                    "code": t.code,
                    "name": t.name,
                    "population": t.population,
                    "lon": t.representative_point[0],
                    "lat": t.representative_point[1],
                }
                for t in self.territories
            ],
            "covariate_names": list(COVARIATES),
            "covariates": {
                str(y): c.values.tolist() for y, c in self.covariates.items()
            },
            "travel_time": self.costs.travel_time.tolist(),
            "distance": self.costs.distance.tolist(),
            "origin": self.origin.code,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TerritorySystem":
        territories = tuple(
            Territory(
                code=t["code"],
                name=t["name"],
                population=float(t["population"]),
                representative_point=(float(t["lon"]), float(t["lat"])),
            )
            for t in data["territories"]
        )
        if list(data.get("covariate_names", COVARIATES)) != list(COVARIATES):
            raise ValueError("covariate column order does not match")
        covariates = {
            int(y): CovariateSet(int(y), np.array(v, dtype=float).reshape(-1, len(COVARIATES)))
            for y, v in data["covariates"].items()
        }
        costs = CostMatrices(
            np.array(data["travel_time"], dtype=float),
            np.array(data["distance"], dtype=float),
        )
        codes = [t.code for t in territories]
        return cls(territories, covariates, costs, codes.index(data["origin"]))


@dataclass(frozen=True)
class FlowObservation:
    """Observed line counts from the origin, aligned with ``codes``."""

    year: int
    codes: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "codes", tuple(self.codes))
        object.__setattr__(self, "counts", _frozen(self.counts))

    @property
    def total_outflow(self) -> float:
        return float(np.sum(self.counts))

    @property
    def n(self) -> int:
        return len(self.counts)

    def to_dict(self) -> dict:
        return {"year": self.year, "codes": list(self.codes), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "FlowObservation":
        return cls(int(data["year"]), tuple(data["codes"]), np.array(data["counts"], dtype=float))


@dataclass(frozen=True)
class Dataset:
    system: TerritorySystem
    flows: Mapping[int, FlowObservation]

    def __post_init__(self):
        object.__setattr__(self, "flows", {int(y): f for y, f in sorted(self.flows.items())})

    @property
    def years(self) -> tuple[int, ...]:
        return tuple(self.flows)

    def to_json(self, **extra) -> str:
        payload = dict(extra)
        payload["system"] = self.system.to_dict()
        payload["flows"] = [f.to_dict() for f in self.flows.values()]
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        data = json.loads(text)
        system = TerritorySystem.from_dict(data["system"])
        flows = {f["year"]: FlowObservation.from_dict(f) for f in data["flows"]}
        return cls(system, flows)


# --------------------------------------------------------------------------
# model specifications and results
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    family: str
    loss: str
    covariate_mask: tuple[bool, ...] = (False,) * len(COVARIATES)
    spec_id: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        mask = tuple(bool(m) for m in self.covariate_mask)
        if len(mask) != len(COVARIATES):
            raise ValueError("covariate mask needs five entries")
        if self.family != "Retail" and any(mask):
            raise ValueError(f"{self.family} takes no covariates")
        object.__setattr__(self, "covariate_mask", mask)

    @property
    def covariates(self) -> tuple[str, ...]:
        return tuple(c for c, m in zip(COVARIATES, self.covariate_mask) if m)

    @property
    def param_names(self) -> tuple[str, ...]:
        if self.family == "Gravity":
            return ("b", "c")
        if self.family == "Radiation":
            return ("rho", "r")
        return ("beta",) + tuple(f"alpha_{c}" for c in self.covariates)

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    @property
    def mask_label(self) -> str:
        return "+".join(self.covariates) or "none"

    @classmethod
    def retail(cls, loss: str, covariates: Sequence[str] = (), spec_id: int = 0) -> "ModelSpec":
        unknown = set(covariates) - set(COVARIATES)
        if unknown:
            raise ValueError(f"unknown covariates {sorted(unknown)}")
        return cls("Retail", loss, tuple(c in covariates for c in COVARIATES), spec_id)


ALL_PARAM_NAMES: tuple[str, ...] = ("b", "c", "rho", "r", "beta") + tuple(
    f"alpha_{c}" for c in COVARIATES
)


@dataclass(frozen=True)
class ParameterVector(Mapping[str, float]):
    """Named, ordered parameter values."""

    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", _frozen(self.values))
        if len(self.names) != len(self.values):
            raise ValueError("names and values differ in length")

    @classmethod
    def for_spec(cls, spec: ModelSpec, values) -> "ParameterVector":
        if isinstance(values, Mapping):
            values = [values[k] for k in spec.param_names]
        return cls(spec.param_names, values)

    def __getitem__(self, key: str) -> float:
        try:
            return float(self.values[self.names.index(key)])
        except ValueError:
            raise KeyError(key) from None

    def __iter__(self) -> Iterator[str]:
        return iter(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def __repr__(self) -> str:
        body = ", ".join(f"{k}={v:.6g}" for k, v in zip(self.names, self.values))
        return f"ParameterVector({body})"


@dataclass(frozen=True)
class CalibrationResult:
    spec: ModelSpec
    training_year: int
    params: ParameterVector
    std_errors: np.ndarray
    final_loss: float
    log_likelihood: float
    iterations: int
    converged: bool
    grad_norm: float
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "std_errors", _frozen(self.std_errors))
        object.__setattr__(self, "warnings", tuple(self.warnings))


@dataclass(frozen=True)
class EvaluationReport:
    spec: ModelSpec
    train_year: int
    params: ParameterVector
    std_errors: np.ndarray
    s_per_fold: Mapping[int, float]  # keyed by the held-out (scored) year
    s_mean: float
    bic: float
    bic_fold: float
    bic_textbook: float
    log_mse: float
    log_mse_excluded: int
    fits: Mapping[int, CalibrationResult] = field(default_factory=dict)
    rank: int = 0
    status: str = "ok"

    def __post_init__(self):
        object.__setattr__(self, "std_errors", _frozen(self.std_errors))
        for s in self.s_per_fold.values():
            if not (np.isnan(s) or 0.0 <= s <= 1.0):
                raise ValueError(f"Sorensen index {s} outside [0, 1]")


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


def find_violations(system: TerritorySystem, flows: Sequence[FlowObservation] = ()) -> list[Violation]:
    """Collect every structural problem with ``system`` and ``flows``."""
    out: list[Violation] = []
    n = system.n
    codes = system.codes
    seen: set[str] = set()
    for t in system.territories:
        if t.code in seen:
            out.append(DuplicateTerritory(f"territory code {t.code!r} repeated", t.code))
        seen.add(t.code)
        if not (np.isfinite(t.population) and t.population > 0):
            out.append(NonPositivePopulation(f"population of {t.code} is {t.population}", t.code))
    if not 0 <= system.origin_index < max(n, 1):
        out.append(InvalidOrigin(f"origin index {system.origin_index} out of range"))
    if n < 2:
        out.append(DimensionMismatch(f"need at least two territories, got {n}"))

    for label, mat in (("travel_time", system.costs.travel_time), ("distance", system.costs.distance)):
        if mat.shape != (n, n):
            out.append(DimensionMismatch(f"{label} matrix is {mat.shape[0] if mat.ndim else 0}x"
                                         f"{mat.shape[1] if mat.ndim > 1 else 0} for {n} territories"))
            continue
        off = ~np.eye(n, dtype=bool)
        if np.any(np.diag(mat) != 0):
            out.append(InvalidCost(f"{label} diagonal must be zero"))
        bad = off & ~(np.isfinite(mat) & (mat > 0))
        for i, j in zip(*np.nonzero(bad)):
            out.append(InvalidCost(f"{label}[{codes[i]},{codes[j]}] = {mat[i, j]} is not positive"))

    for year, cov in system.covariates.items():
        if cov.values.shape != (n, len(COVARIATES)):
            out.append(DimensionMismatch(f"covariates for {year} have shape {cov.values.shape}"))
            continue
        bad = ~(np.isfinite(cov.values) & (cov.values > 0))
        for i, k in zip(*np.nonzero(bad)):
            out.append(NonPositiveCovariate(
                f"{COVARIATES[k]} for {codes[i]} in {year} is {cov.values[i, k]}",
                codes[i], COVARIATES[k]))

    expected = system.destination_codes if 0 <= system.origin_index < n else ()
    for obs in flows:
        if obs.year not in system.covariates:
            out.append(UnknownYear(f"flows for {obs.year} have no covariates", obs.year))
        if obs.counts.shape != (len(obs.codes),) or tuple(obs.codes) != tuple(expected):
            out.append(DimensionMismatch(
                f"flows for {obs.year} cover {len(obs.codes)} destinations, expected {len(expected)}"))
            continue
        for code, c in zip(obs.codes, obs.counts):
            if not (np.isfinite(c) and c >= 0):
                out.append(NegativeCount(f"count for {code} in {obs.year} is {c}", code, obs.year))
    return out


def validate_system(system: TerritorySystem, flows: Sequence[FlowObservation] = ()) -> Dataset:
    """Return the dataset, or raise ValidationError listing every violation."""
    flows = list(flows.values()) if isinstance(flows, Mapping) else list(flows)
    problems = find_violations(system, flows)
    if problems:
        raise ValidationError(problems)
    return Dataset(system, {f.year: f for f in flows})
