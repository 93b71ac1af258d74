"""Read the tabular inputs, normalise covariates and assemble a dataset.

Territory codes in every file pass through ``mapping.csv`` (county code to
police territory code; unmapped codes stand for themselves), so county-level
rows and the two London forces are folded together by the same aggregation.
Additive statistics are summed before any rate is formed; per-head income
and beds per capita are population-weighted averages.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .domain import (COVARIATES, CostMatrices, CovariateSet, Dataset, FlowObservation,
                     Territory, TerritorySystem, ValidationError, find_violations)

log = logging.getLogger(__name__)

FILES = ("territories", "covariates", "costs", "flows", "mapping")
COLUMNS = {
    "territories": ("code", "name", "lon", "lat", "population", "year"),
    "covariates": ("code", "year", "misuse_admissions", "poisoning_admissions", "police_fte",
                   "knife_crimes", "gdhi_total", "beds_per_capita"),
    "costs": ("origin_code", "dest_code", "travel_time_min", "distance_km"),
    "flows": ("year", "dest_code", "lines"),
    "mapping": ("county_code", "police_code"),
}
ADDITIVE = ("misuse_admissions", "poisoning_admissions", "police_fte", "knife_crimes")


# --------------------------------------------------------------------------
# problems
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Issue:
    kind: str
    message: str
    file: str = ""
    line: int = 0
    column: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind, "message": self.message, "file": self.file,
                "line": self.line, "column": self.column}

    def __str__(self) -> str:
        where = self.file
        if self.file and self.line:
            where += f":{self.line}"
        if self.column:
            where += f" [{self.column}]"
        return f"{where} {self.kind}: {self.message}".strip()


class IngestError(ValueError):
    def __init__(self, issues: Sequence[Issue]):
        self.issues = list(issues)
        super().__init__("\n".join(str(i) for i in self.issues))


@dataclass(frozen=True)
class Exclusion:
    """A row that did not make it into the dataset, and why."""

    file: str
    line: int
    reason: str

    def to_dict(self) -> dict:
        return {"file": self.file, "line": self.line, "reason": self.reason}


class ZeroBeds(ValueError):
    pass


class EmptyGroup(ValueError):
    pass


class MissingTerritory(KeyError):
    pass


# --------------------------------------------------------------------------
# transforms
# --------------------------------------------------------------------------


def per_capita_100k(count: float, population: float) -> float:
    if population <= 0:
        raise ValueError("population must be positive")
    return count / population * 100_000.0


def bed_adjust(admission_rate: float, beds_per_capita: float) -> float:
    if beds_per_capita <= 0:
        raise ZeroBeds(f"beds per capita is {beds_per_capita}")
    return admission_rate / beds_per_capita


def aggregate_weighted(values: Sequence[float], populations: Sequence[float]) -> float:
    """Population-weighted mean of member values."""
    v = np.asarray(values, dtype=float)
    p = np.asarray(populations, dtype=float)
    if v.size == 0:
        raise EmptyGroup("no members to aggregate")
    if np.any(p < 0) or p.sum() <= 0:
        raise ValueError("weights must be nonnegative with a positive total")
    return float(v @ p / p.sum())


def aggregate_sum(counts: Iterable[float]) -> float:
    c = [float(x) for x in counts]
    if any(x < 0 for x in c):
        raise ValueError("counts must be nonnegative")
    return float(sum(c))


@dataclass(frozen=True)
class CountyRecord:
    """Raw statistics of one county (or force) for one year."""

    county_code: str
    police_territory_code: str
    population: float
    year: int
    counts: Mapping[str, float] = field(default_factory=dict)
    gdhi_per_head: float = float("nan")
    beds_per_capita: float = float("nan")
    name: str = ""
    point: tuple[float, float] = (float("nan"), float("nan"))


def aggregate_records(records: Sequence[CountyRecord], code: str | None = None) -> CountyRecord:
    """Fold member records into one territory record."""
    if not records:
        raise EmptyGroup("no members to aggregate")
    pops = [r.population for r in records]
    lead = max(records, key=lambda r: (r.population, _neg(r.county_code)))
    code = code or lead.police_territory_code
    keys = sorted({k for r in records for k in r.counts})
    counts = {k: aggregate_sum(r.counts.get(k, 0.0) for r in records) for k in keys}
    return CountyRecord(
        county_code=code,
        police_territory_code=code,
        population=aggregate_sum(pops),
        year=lead.year,
        counts=counts,
        gdhi_per_head=aggregate_weighted([r.gdhi_per_head for r in records], pops),
        beds_per_capita=aggregate_weighted([r.beds_per_capita for r in records], pops),
        name=lead.name,
        point=lead.point,
    )


def _neg(code: str):
    # lexicographically smaller code wins ties in max()
    return tuple(-ord(ch) for ch in code)


def merge_origin(a: CountyRecord | None, b: CountyRecord | None) -> CountyRecord:
    """Merge two forces into one territory; the more populous one names it."""
    if a is None or b is None:
        raise MissingTerritory("both territories must be present to merge")
    return aggregate_records([a, b], code=(a if a.population >= b.population else b).police_territory_code)


def covariate_rates(record: CountyRecord, bed_adjusted: Sequence[str] = ("misuse_admissions",
                                                                       "poisoning_admissions")
                    ) -> np.ndarray:
    """The five model covariates for a territory record, in COVARIATES order."""
    pop = record.population
    misuse = per_capita_100k(record.counts["misuse_admissions"], pop)
    poisoning = per_capita_100k(record.counts["poisoning_admissions"], pop)
    if "misuse_admissions" in bed_adjusted:
        misuse = bed_adjust(misuse, record.beds_per_capita)
    if "poisoning_admissions" in bed_adjusted:
        poisoning = bed_adjust(poisoning, record.beds_per_capita)
    return np.array([
        misuse,
        poisoning,
        per_capita_100k(record.counts["police_fte"], pop),
        per_capita_100k(record.counts["knife_crimes"], pop),
        record.gdhi_per_head,
    ])


# --------------------------------------------------------------------------
# file loading
# --------------------------------------------------------------------------

BED_ADJUST_CHOICES = {
    "both": ("misuse_admissions", "poisoning_admissions"),
    "misuse": ("misuse_admissions",),
    "poisoning": ("poisoning_admissions",),
    "none": (),
}


@dataclass(frozen=True)
class IngestConfig:
    origin: str
    population_year: int | None = None
    bed_adjust: str = "both"
    allow_fractional_lines: bool = False


class IngestResult(NamedTuple):
    dataset: Dataset
    exclusions: list


class _Reader:
    """Collects parse problems instead of stopping at the first."""

    def __init__(self):
        self.issues: list[Issue] = []

    def rows(self, path: Path, kind: str):
        name = path.name
        try:
            fh = open(path, newline="", encoding="utf-8")
        except OSError as exc:
            self.issues.append(Issue("ParseError", f"cannot open: {exc.strerror}", name))
            return []
        with fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                self.issues.append(Issue("ParseError", "missing header row", name, 1))
                return []
            except (csv.Error, UnicodeDecodeError) as exc:
                self.issues.append(Issue("ParseError", str(exc), name, 1))
                return []
            header = [h.strip().lstrip("﻿") for h in header]
            missing = [c for c in COLUMNS[kind] if c not in header]
            for c in missing:
                self.issues.append(Issue("MissingColumn", f"column {c!r} not in header", name, 1, c))
            if missing:
                return []
            out = []
            try:
                for row in reader:
                    if not any(cell.strip() for cell in row):
                        continue
                    if len(row) != len(header):
                        self.issues.append(Issue("ParseError",
                                                 f"expected {len(header)} fields, got {len(row)}",
                                                 name, reader.line_num))
                        continue
                    out.append((reader.line_num, dict(zip(header, (c.strip() for c in row)))))
            except (csv.Error, UnicodeDecodeError) as exc:
                self.issues.append(Issue("ParseError", str(exc), name, reader.line_num))
            return out

    def number(self, row, col, file, line, *, positive=False, nonnegative=False):
        text = row[col]
        try:
            value = float(text)
        except ValueError:
            self.issues.append(Issue("ParseError", f"{text!r} is not a number", file, line, col))
            return None
        if not np.isfinite(value):
            self.issues.append(Issue("ParseError", f"{text!r} is not finite", file, line, col))
            return None
        if positive and value <= 0:
            self.issues.append(Issue("ParseError", f"{text!r} must be positive", file, line, col))
            return None
        if nonnegative and value < 0:
            self.issues.append(Issue("ParseError", f"{text!r} must be nonnegative", file, line, col))
            return None
        return value

    def integer(self, row, col, file, line):
        text = row[col]
        try:
            return int(text)
        except ValueError:
            self.issues.append(Issue("ParseError", f"{text!r} is not an integer", file, line, col))
            return None


def _resolve_paths(paths) -> dict[str, Path | None]:
    if isinstance(paths, (str, Path)):
        root = Path(paths)
        found = {k: root / f"{k}.csv" for k in FILES}
        if not found["mapping"].exists():
            found["mapping"] = None
        return found
    out = {k: (Path(paths[k]) if paths.get(k) else None) for k in FILES}
    for k in FILES[:4]:
        if out[k] is None:
            raise IngestError([Issue("MissingFile", f"no path given for {k}.csv")])
    return out


def load_dataset(paths, config: IngestConfig) -> IngestResult:
    """Load, aggregate, normalise and validate.

    ``paths`` is a directory holding the five CSV files, or a mapping from
    file kind to path (``mapping`` optional).  Raises IngestError listing
    every problem found.
    """
    if config.bed_adjust not in BED_ADJUST_CHOICES:
        raise ValueError(f"bed_adjust must be one of {sorted(BED_ADJUST_CHOICES)}")
    paths = _resolve_paths(paths)
    rd = _Reader()
    exclusions: list[Exclusion] = []

    def exclude(file, line, reason):
        exclusions.append(Exclusion(file, line, reason))
        log.info("excluded %s:%d: %s", file, line, reason)

    # -- mapping --------------------------------------------------------------
    mapping: dict[str, str] = {}
    if paths["mapping"] is not None:
        fname = paths["mapping"].name
        for line, row in rd.rows(paths["mapping"], "mapping"):
            county, police = row["county_code"], row["police_code"]
            if not county or not police:
                rd.issues.append(Issue("ParseError", "empty code", fname, line))
            elif county in mapping and mapping[county] != police:
                rd.issues.append(Issue("DuplicateTerritory",
                                       f"county {county!r} mapped to {mapping[county]!r} and {police!r}",
                                       fname, line, "county_code"))
            else:
                mapping[county] = police

    def target(code: str) -> str:
        return mapping.get(code, code)

    # -- territories ------------------------------------------------------------
    fname = paths["territories"].name
    members: dict[str, dict[int, dict]] = defaultdict(dict)  # raw code -> year -> row
    for line, row in rd.rows(paths["territories"], "territories"):
        code = row["code"]
        year = rd.integer(row, "year", fname, line)
        pop = rd.number(row, "population", fname, line, positive=True)
        lon = rd.number(row, "lon", fname, line)
        lat = rd.number(row, "lat", fname, line)
        if not code:
            rd.issues.append(Issue("ParseError", "empty code", fname, line, "code"))
            continue
        if None in (year, pop, lon, lat):
            continue
        if year in members[code]:
            rd.issues.append(Issue("DuplicateTerritory", f"{code!r} listed twice for {year}",
                                   fname, line, "code"))
            continue
        members[code][year] = {"name": row["name"] or code, "population": pop,
                               "point": (lon, lat), "line": line}

    all_years = sorted({y for rows in members.values() for y in rows})
    pop_year = config.population_year if config.population_year is not None else (
        all_years[-1] if all_years else None)

    def population(code: str, year: int) -> float | None:
        rows = members.get(code, {})
        if year in rows:
            return rows[year]["population"]
        earlier = [y for y in rows if y <= year]
        if earlier:
            return rows[max(earlier)]["population"]
        return None

    groups: dict[str, list[str]] = defaultdict(list)
    for code in sorted(members):
        groups[target(code)].append(code)

    # -- covariates -------------------------------------------------------------
    fname = paths["covariates"].name
    cov_records: dict[tuple[str, int], list[CountyRecord]] = defaultdict(list)
    seen_cov: set[tuple[str, int]] = set()
    for line, row in rd.rows(paths["covariates"], "covariates"):
        code = row["code"]
        year = rd.integer(row, "year", fname, line)
        nums = {c: rd.number(row, c, fname, line, nonnegative=True) for c in ADDITIVE}
        gdhi = rd.number(row, "gdhi_total", fname, line, nonnegative=True)
        beds = rd.number(row, "beds_per_capita", fname, line, nonnegative=True)
        if year is None or gdhi is None or beds is None or None in nums.values():
            continue
        if code not in members:
            rd.issues.append(Issue("UnmappedCounty", f"covariate code {code!r} has no territory row",
                                   fname, line, "code"))
            continue
        if (code, year) in seen_cov:
            rd.issues.append(Issue("DuplicateTerritory", f"covariates for {code!r} repeated for {year}",
                                   fname, line, "code"))
            continue
        seen_cov.add((code, year))
        pop = population(code, year)
        if pop is None:
            rd.issues.append(Issue("UnknownYear", f"no population for {code!r} in or before {year}",
                                   fname, line, "year"))
            continue
        if beds <= 0 and config.bed_adjust != "none":
            rd.issues.append(Issue("ZeroBeds", f"beds per capita for {code!r} is {beds}",
                                   fname, line, "beds_per_capita"))
            continue
        cov_records[(target(code), year)].append(CountyRecord(
            county_code=code, police_territory_code=target(code), population=pop, year=year,
            counts=nums, gdhi_per_head=gdhi / pop, beds_per_capita=beds))

    # -- flows --------------------------------------------------------------------
    fname = paths["flows"].name
    origin = target(config.origin)
    raw_flows: dict[int, dict[str, float]] = defaultdict(lambda: defaultdict(float))
    for line, row in rd.rows(paths["flows"], "flows"):
        year = rd.integer(row, "year", fname, line)
        lines = rd.number(row, "lines", fname, line, nonnegative=True)
        if year is None or lines is None:
            continue
        if not config.allow_fractional_lines and not float(lines).is_integer():
            rd.issues.append(Issue("ParseError", f"{row['lines']!r} is not a whole number of lines",
                                   fname, line, "lines"))
            continue
        code = row["dest_code"]
        dest = target(code)
        if dest not in groups:
            rd.issues.append(Issue("UnmappedCounty", f"destination {code!r} is not a known territory",
                                   fname, line, "dest_code"))
            continue
        if dest == origin:
            exclude(fname, line, f"flow into the origin territory ({code}) is not modelled")
            continue
        raw_flows[year][dest] += lines

    # -- assemble territories ---------------------------------------------------------
    codes = sorted(groups)
    if origin not in groups:
        rd.issues.append(Issue("MissingTerritory", f"origin {config.origin!r} is not a territory"))
    territories = []
    representative: dict[str, str] = {}
    for code in codes:
        present = [m for m in groups[code] if pop_year in members[m]]
        if not present:
            rd.issues.append(Issue("UnknownYear", f"no population for {code!r} in {pop_year}"))
            continue
        lead = max(present, key=lambda m: (members[m][pop_year]["population"], _neg(m)))
        representative[code] = lead
        own = members.get(code, {}).get(pop_year)
        territories.append(Territory(
            code=code,
            name=(own or members[lead][pop_year])["name"],
            population=aggregate_sum(members[m][pop_year]["population"] for m in present),
            representative_point=members[lead][pop_year]["point"],
        ))
        for m in groups[code]:
            if m not in present:
                exclude(paths["territories"].name, next(iter(members[m].values()))["line"],
                        f"{m} has no population for {pop_year}; left out of {code}")

    # -- covariates per year ---------------------------------------------------------
    adjusted = BED_ADJUST_CHOICES[config.bed_adjust]
    cov_years = sorted({y for (_, y) in cov_records})
    covariates = {}
    for year in cov_years:
        values = np.full((len(codes), len(COVARIATES)), np.nan)
        for i, code in enumerate(codes):
            recs = cov_records.get((code, year))
            if not recs:
                rd.issues.append(Issue("MissingCovariate", f"no covariates for {code!r} in {year}",
                                       paths["covariates"].name))
                continue
            covered = {r.county_code for r in recs}
            for m in groups[code]:
                if m not in covered:
                    rd.issues.append(Issue("MissingCovariate",
                                           f"no covariates for member {m!r} of {code!r} in {year}",
                                           paths["covariates"].name))
            merged = aggregate_records(sorted(recs, key=lambda r: r.county_code), code)
            if adjusted and merged.beds_per_capita <= 0:
                rd.issues.append(Issue("ZeroBeds", f"beds per capita for {code!r} in {year} is 0",
                                       paths["covariates"].name))
                continue
            values[i] = covariate_rates(merged, adjusted)
        covariates[year] = CovariateSet(year, values)

    # -- costs -----------------------------------------------------------------------------
    fname = paths["costs"].name
    index = {c: i for i, c in enumerate(codes)}
    candidates: dict[tuple[str, str], list] = defaultdict(list)
    for line, row in rd.rows(paths["costs"], "costs"):
        tt = rd.number(row, "travel_time_min", fname, line, positive=True)
        dd = rd.number(row, "distance_km", fname, line, positive=True)
        if tt is None or dd is None:
            continue
        a, b = row["origin_code"], row["dest_code"]
        ta, tb = target(a), target(b)
        bad = [c for c, t in ((a, ta), (b, tb)) if t not in index]
        if bad:
            rd.issues.append(Issue("UnmappedCounty", f"cost endpoint {bad[0]!r} is not a territory",
                                   fname, line))
            continue
        if ta == tb:
            exclude(fname, line, f"{a}->{b} lies within territory {ta}")
            continue
        rank = (representative.get(ta) == a) + (representative.get(tb) == b)
        candidates[(ta, tb)].append((-rank, a, b, line, tt, dd))
    n = len(codes)
    travel, dist = np.zeros((n, n)), np.zeros((n, n))
    for (ta, tb), cands in candidates.items():
        cands.sort()
        _, _, _, _, tt, dd = cands[0]
        travel[index[ta], index[tb]], dist[index[ta], index[tb]] = tt, dd
        for _, a, b, line, _, _ in cands[1:]:
            exclude(fname, line, f"{a}->{b} superseded by the representative pair for {ta}->{tb}")
    for a in codes:
        for b in codes:
            if a == b or (a, b) in candidates:
                continue
            if (b, a) in candidates:
                travel[index[a], index[b]] = travel[index[b], index[a]]
                dist[index[a], index[b]] = dist[index[b], index[a]]
                log.info("cost %s->%s taken from the reverse direction", a, b)
            else:
                rd.issues.append(Issue("MissingCost", f"no cost row for {a}->{b}", fname))

    # -- flows per year ----------------------------------------------------------------
    dest_codes = [c for c in codes if c != origin]
    flows = {}
    for year in sorted(raw_flows):
        if year not in covariates:
            rd.issues.append(Issue("UnknownYear", f"flows for {year} have no covariates",
                                   paths["flows"].name))
        counts = []
        for c in dest_codes:
            if c not in raw_flows[year]:
                exclusions.append(Exclusion(paths["flows"].name, 0,
                                            f"no row for {c} in {year}; counted as 0 lines"))
            counts.append(raw_flows[year].get(c, 0.0))
        flows[year] = FlowObservation(year, tuple(dest_codes), counts)

    if rd.issues:
        raise IngestError(rd.issues)
    system = TerritorySystem(tuple(territories), covariates, CostMatrices(travel, dist),
                             codes.index(origin))
    violations = find_violations(system, list(flows.values()))
    if violations:
        raise IngestError([Issue(v.kind, v.message) for v in violations])
    return IngestResult(Dataset(system, flows), exclusions)


# --------------------------------------------------------------------------
# bundles
# --------------------------------------------------------------------------


def save_bundle(dataset: Dataset, path: str | Path, manifest: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = dataset.to_json(manifest=dict(manifest or {}))
    path.write_text(text, encoding="utf-8")
    return path


def load_bundle(path: str | Path) -> Dataset:
    try:
        dataset = Dataset.from_json(Path(path).read_text(encoding="utf-8"))
    except (KeyError, ValueError, TypeError) as exc:
        raise IngestError([Issue("ParseError", f"not a dataset bundle: {exc}", Path(path).name)])
    violations = find_violations(dataset.system, list(dataset.flows.values()))
    if violations:
        raise ValidationError(violations)
    return dataset
