"""Command-line entry point.

Exit codes: 0 success, 2 validation failure, 3 calibration failure,
4 usage error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .calibrate import CalibrationOptions
from .domain import ALL_PARAM_NAMES, ModelSpec, ParameterVector, ValidationError
from .ingest import (BED_ADJUST_CHOICES, IngestConfig, IngestError, load_bundle, load_dataset,
                     save_bundle)
from .models import prediction_for
from .select import (RANK_KEYS, EvaluationReport, concentration_share, enumerate_models,
                     rank_models, run_pipeline, spec_by_id)

EXIT_OK, EXIT_INVALID, EXIT_CALIBRATION, EXIT_USAGE = 0, 2, 3, 4
JOBS_ENV = "SPATIALFLOW_JOBS"

log = logging.getLogger("spatialflow")


class UsageError(Exception):
    pass


class UnknownSpec(UsageError):
    pass


class MissingBoundaries(ValueError):
    pass


class UnfittedSpec(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def fmt(x) -> str:
    """Shortest round-trip decimal; blank for missing."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def read_config(path: str | Path) -> dict[str, str]:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Flags beat the config file, which beats built-in defaults.

    ``defaults`` maps each key to ``(default, cast)``.
    """
    conf = read_config(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, (default, cast) in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in conf:
            try:
                resolved[key] = cast(conf[key])
            except ValueError:
                raise UsageError(f"config value for {key!r} is invalid: {conf[key]!r}") from None
        else:
            resolved[key] = default
    return resolved


def manifest(command: str, options: dict, inputs: Sequence[str | Path]) -> dict:
    blob = json.dumps(options, sort_keys=True, default=str).encode()
    return {
        "tool": "spatialflow",
        "version": __version__,
        "command": command,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "inputs": {Path(p).name: sha256_file(p) for p in inputs if p and Path(p).exists()},
        "options": options,
    }


def write_manifest(output: Path, data: dict) -> Path:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch
           else _dt.datetime.now(_dt.timezone.utc))
    data = dict(data, timestamp=now.isoformat(timespec="seconds"))
    path = output.with_name(output.name + ".manifest.json")
    path.write_text(json.dumps(data, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def parse_specs(text: str) -> list[ModelSpec]:
    if text.strip().lower() == "all":
        return enumerate_models()
    ids: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                ids.update(range(lo, hi + 1))
            else:
                ids.add(int(part))
        except ValueError:
            raise UsageError(f"bad spec list {text!r}") from None
    try:
        return [spec_by_id(i) for i in sorted(ids)]
    except KeyError as exc:
        raise UnknownSpec(str(exc.args[0])) from None


def _emit_issues(issues, as_json: bool) -> None:
    for issue in issues:
        if as_json:
            print(json.dumps(issue.to_dict(), sort_keys=True), file=sys.stderr)
        else:
            print(f"error: {issue}", file=sys.stderr)


# --------------------------------------------------------------------------
# ingest
# --------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    opts = resolve(args, {"origin": (None, str), "population_year": (None, int),
                         "bed_adjust": ("both", str)})
    if not opts["origin"]:
        raise UsageError("--origin is required (flag or config)")
    if opts["bed_adjust"] not in BED_ADJUST_CHOICES:
        raise UsageError(f"--bed-adjust must be one of {sorted(BED_ADJUST_CHOICES)}")
    if args.data_dir:
        paths = args.data_dir
        root = Path(args.data_dir)
        inputs = [root / f"{k}.csv" for k in ("territories", "covariates", "costs", "flows", "mapping")]
    else:
        paths = {k: getattr(args, k) for k in ("territories", "covariates", "costs", "flows", "mapping")}
        missing = [k for k in ("territories", "covariates", "costs", "flows") if not paths[k]]
        if missing:
            raise UsageError(f"missing input paths: {', '.join(missing)} (or use --data-dir)")
        inputs = list(paths.values())
    config = IngestConfig(origin=opts["origin"], population_year=opts["population_year"],
                          bed_adjust=opts["bed_adjust"])
    try:
        result = load_dataset(paths, config)
    except IngestError as exc:
        _emit_issues(exc.issues, args.json)
        return EXIT_INVALID
    meta = manifest("ingest", opts, [p for p in inputs if p])
    meta["exclusions"] = [e.to_dict() for e in result.exclusions]
    out = save_bundle(result.dataset, args.out, meta)
    write_manifest(out, meta)
    for e in result.exclusions:
        where = f"{e.file}:{e.line}" if e.line else e.file
        print(f"note: {where}: {e.reason}", file=sys.stderr)
    print(f"wrote {out} ({result.dataset.system.n} territories, years {list(result.dataset.years)})")
    return EXIT_OK


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------


def results_header(years: Sequence[int]) -> list[str]:
    return (["spec_id", "family", "loss", "mask", "train_year"]
            + [f"param_{p}" for p in ALL_PARAM_NAMES] + [f"se_{p}" for p in ALL_PARAM_NAMES]
            + [f"S_{y}" for y in years]
            + ["S_mean", "BIC", "BIC_fold", "BIC_textbook", "log_MSE", "log_MSE_excluded",
               "converged", "rank", "status"])


def results_row(rep: EvaluationReport, years: Sequence[int]) -> list[str]:
    values = dict(zip(rep.params.names, rep.params.values))
    errors = dict(zip(rep.params.names, rep.std_errors))
    converged = all(f.converged for f in rep.fits.values()) if rep.fits else False
    return ([fmt(rep.spec.spec_id), rep.spec.family, rep.spec.loss, rep.spec.mask_label,
             fmt(rep.train_year)]
            + [fmt(values[p]) if p in values else "" for p in ALL_PARAM_NAMES]
            + [fmt(errors[p]) if p in errors else "" for p in ALL_PARAM_NAMES]
            + [fmt(rep.s_per_fold.get(y)) for y in years]
            + [fmt(rep.s_mean), fmt(rep.bic), fmt(rep.bic_fold), fmt(rep.bic_textbook),
               fmt(rep.log_mse), fmt(rep.log_mse_excluded), fmt(converged), fmt(rep.rank),
               rep.status])


def render_results(reports: Sequence[EvaluationReport], years: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(results_header(years))
    for rep in sorted(reports, key=lambda r: r.spec.spec_id):
        w.writerow(results_row(rep, years))
    return buf.getvalue()


def cmd_run(args) -> int:
    env_jobs = os.environ.get(JOBS_ENV)
    opts = resolve(args, {
        "specs": ("all", str), "train_year": (None, int), "lam": (1.0, float),
        "rank_by": ("log_mse", str), "tolerance": (1e-8, float), "max_iter": (10_000, int),
        "jobs": (int(env_jobs) if env_jobs else 1, int),
    })
    if opts["rank_by"] not in RANK_KEYS:
        raise UsageError(f"--rank-by must be one of {RANK_KEYS}")
    specs = parse_specs(str(opts["specs"]))
    dataset = load_bundle(args.bundle)
    years = dataset.years
    if len(years) != 2:
        print(f"error: cross-validation needs two years of flows, bundle has {list(years)}",
              file=sys.stderr)
        return EXIT_INVALID
    train_year = int(opts["train_year"]) if opts["train_year"] is not None else years[0]
    if train_year not in years:
        raise UsageError(f"--train-year must be one of {list(years)}")
    options = CalibrationOptions(lam=float(opts["lam"]), tolerance=float(opts["tolerance"]),
                                 max_iter=int(opts["max_iter"]))
    reports = run_pipeline(dataset, specs, options, train_year, jobs=int(opts["jobs"]))
    ranked = rank_models(reports, opts["rank_by"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "results.csv"
    path.write_text(render_results(ranked.reports, years), encoding="utf-8")
    run_opts = {k: v for k, v in opts.items() if k != "jobs"}
    write_manifest(path, manifest("run", run_opts, [args.bundle]))
    failed = [r for r in reports if r.status != "ok"]
    for r in failed:
        print(f"spec {r.spec.spec_id}: {r.status}", file=sys.stderr)
    print(f"wrote {path} ({len(reports)} rows, {len(failed)} failed)")
    if failed and not args.keep_going:
        return EXIT_CALIBRATION
    return EXIT_OK


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------


def read_results_params(path: str | Path, spec_id: int) -> tuple[ModelSpec, ParameterVector, int]:
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if int(row["spec_id"]) == spec_id:
                spec = spec_by_id(spec_id)
                values = [float(row[f"param_{p}"]) for p in spec.param_names]
                if any(math.isnan(v) for v in values):
                    raise UnfittedSpec(f"spec {spec_id} has no fitted parameters ({row['status']})")
                return spec, ParameterVector(spec.param_names, values), int(row["train_year"])
    raise UnknownSpec(f"spec {spec_id} not in {path}")


def export_rows(dataset, spec, params, year):
    system = dataset.system
    if year not in dataset.flows:
        raise UsageError(f"no flows for {year}; have {list(dataset.years)}")
    obs = dataset.flows[year]
    pred = prediction_for(spec, params, system, year, obs.total_outflow)
    names = {t.code: t.name for t in system.territories}
    return [
        {"code": code, "name": names[code], "observed": float(o), "modelled": float(m),
         "diff": float(m) - float(o), "excluded_from_logmse": bool(o <= 0)}
        for code, o, m in zip(obs.codes, obs.counts, pred.values)
    ]


def geojson_export(rows, boundaries: dict, key: str = "code") -> dict:
    by_code = {}
    for feat in boundaries.get("features", []):
        code = (feat.get("properties") or {}).get(key)
        if code is not None:
            by_code[str(code)] = feat
    missing = [r["code"] for r in rows if r["code"] not in by_code]
    if missing:
        raise MissingBoundaries(f"no boundary feature for {', '.join(missing)}")
    features = []
    for r in rows:
        src = by_code[r["code"]]
        features.append({"type": "Feature", "geometry": src.get("geometry"), "properties": dict(r)})
    return {"type": "FeatureCollection", "features": features}


def dispersion_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["code", "observed", "modelled"])
    for r in sorted(rows, key=lambda r: (-r["observed"], r["code"])):
        w.writerow([r["code"], fmt(r["observed"]), fmt(r["modelled"])])
    return buf.getvalue()


def cmd_export(args) -> int:
    if not args.geojson and not args.dispersion:
        raise UsageError("nothing to export: give --geojson and/or --dispersion")
    dataset = load_bundle(args.bundle)
    spec, params, train_year = read_results_params(args.results, args.spec)
    year = args.year if args.year is not None else train_year
    rows = export_rows(dataset, spec, params, year)
    opts = {"spec": args.spec, "year": year}
    if args.geojson:
        if not args.boundaries or not Path(args.boundaries).exists():
            raise MissingBoundaries("map export needs --boundaries with a feature collection")
        boundaries = json.loads(Path(args.boundaries).read_text(encoding="utf-8"))
        fc = geojson_export(rows, boundaries, args.key)
        out = Path(args.geojson)
        out.write_text(json.dumps(fc, sort_keys=True) + "\n", encoding="utf-8")
        write_manifest(out, manifest("export", opts, [args.bundle, args.results, args.boundaries]))
        print(f"wrote {out}")
    if args.dispersion:
        out = Path(args.dispersion)
        out.write_text(dispersion_csv(rows), encoding="utf-8")
        write_manifest(out, manifest("export", opts, [args.bundle, args.results]))
        print(f"wrote {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# share
# --------------------------------------------------------------------------


def read_subset(path) -> list[str]:
    codes = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        for part in raw.split("#", 1)[0].replace(",", " ").split():
            codes.append(part)
    return codes


def cmd_share(args) -> int:
    dataset = load_bundle(args.bundle)
    subset = read_subset(args.subset_file)
    dests = set(dataset.system.destination_codes)
    unknown = sorted(set(subset) - dests)
    if unknown:
        print(f"error: unknown destination codes in subset: {', '.join(unknown)}", file=sys.stderr)
        return EXIT_INVALID
    for year, obs in dataset.flows.items():
        share = concentration_share(obs, subset)
        print(f"{year}: {100 * share:.2f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synth import DEFAULT_TRUTH, SynthConfig, generate_flows, generate_system, write_ingest_files

    config = SynthConfig(territory_count=args.territories, seed=args.seed,
                         years=tuple(args.years))
    system = generate_system(config)
    if args.family == "Retail":
        spec = ModelSpec.retail("Poisson", ["knife_crime"])
    else:
        spec = ModelSpec(args.family, "Poisson")
    truth = DEFAULT_TRUTH[args.family]
    flows = [generate_flows(spec, truth, system, args.total, noise=args.noise,
                            seed=args.seed * 1000 + k, year=y)
             for k, y in enumerate(config.years)]
    paths = write_ingest_files(system, flows, args.out)
    print(f"wrote {', '.join(str(p) for p in paths.values())} (origin {system.origin.code})")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spatialflow", description="Single-origin spatial interaction model toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="normalise raw CSVs into a dataset bundle")
    s.add_argument("--data-dir", help="directory holding the five CSV files")
    for k in ("territories", "covariates", "costs", "flows", "mapping"):
        s.add_argument(f"--{k}", help=f"path to {k}.csv")
    s.add_argument("--origin", help="code of the origin territory (after mapping)")
    s.add_argument("--population-year", type=int)
    s.add_argument("--bed-adjust", choices=sorted(BED_ADJUST_CHOICES))
    s.add_argument("--config")
    s.add_argument("--json", action="store_true", help="errors as one JSON object per line")
    s.add_argument("--out", required=True, help="bundle path to write")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("run", help="calibrate and cross-validate model specs")
    s.add_argument("--bundle", required=True)
    s.add_argument("--specs", help="'all' or ids such as 1,2,5-9")
    s.add_argument("--train-year", type=int)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--rank-by", choices=RANK_KEYS)
    s.add_argument("--tolerance", type=float)
    s.add_argument("--max-iter", type=int)
    s.add_argument("--jobs", type=int, help=f"worker processes (default ${JOBS_ENV} or 1)")
    s.add_argument("--keep-going", action="store_true", help="exit 0 even if some specs fail")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("export", help="map and dispersion data for one fitted spec")
    s.add_argument("--bundle", required=True)
    s.add_argument("--results", required=True, help="results.csv from run")
    s.add_argument("--spec", type=int, required=True)
    s.add_argument("--year", type=int)
    s.add_argument("--geojson", help="feature collection to write")
    s.add_argument("--boundaries", help="feature collection keyed by territory code")
    s.add_argument("--key", default="code", help="boundary property holding the code")
    s.add_argument("--dispersion", help="CSV to write")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("share", help="share of lines going to a subset of territories")
    s.add_argument("--bundle", required=True)
    s.add_argument("--subset-file", required=True)
    s.set_defaults(func=cmd_share)

    s = sub.add_parser("synth", help="write a synthetic dataset in the ingest formats")
    s.add_argument("--territories", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--years", type=int, nargs=2, default=[2019, 2020])
    s.add_argument("--family", choices=("Gravity", "Radiation", "Retail"), default="Retail")
    s.add_argument("--total", type=float, default=500.0)
    s.add_argument("--noise", choices=("poisson", "none"), default="poisson")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestError, ValidationError, MissingBoundaries, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ArithmeticError, RuntimeError) as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION


if __name__ == "__main__":
    sys.exit(main())
