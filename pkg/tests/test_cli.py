import csv
import json
import shutil
import subprocess
import sys

import pytest

from spatialflow import cli

from conftest import FIXTURES


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def tiny_bundle(tmp_path, tiny3_dir):
    out = tmp_path / "tiny.json"
    assert run("ingest", "--data-dir", tiny3_dir, "--origin", "LON", "--out", out) == 0
    return out


@pytest.fixture
def synth_bundle():
    return FIXTURES / "synth10" / "bundle.json"


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- ingest ------------------------------------------------------------------------------


def test_ingest_is_byte_stable(tmp_path, tiny3_dir, tiny_bundle):
    again = tmp_path / "again.json"
    assert run("ingest", "--data-dir", tiny3_dir, "--origin", "LON", "--out", again) == 0
    assert tiny_bundle.read_bytes() == again.read_bytes()
    meta = json.loads(tiny_bundle.with_name("tiny.json.manifest.json").read_text())
    assert set(meta["inputs"]) == {"territories.csv", "covariates.csv", "costs.csv",
                                   "flows.csv", "mapping.csv"}
    assert meta["version"] and meta["config_hash"] and meta["timestamp"]


def test_ingest_from_individual_paths(tmp_path, tiny3_dir, tiny_bundle):
    out = tmp_path / "paths.json"
    args = [f"--{k}={tiny3_dir / (k + '.csv')}" for k in
            ("territories", "covariates", "costs", "flows", "mapping")]
    assert run("ingest", *args, "--origin", "LON", "--out", out) == 0
    assert out.read_bytes() == tiny_bundle.read_bytes()


def broken_copy(tmp_path, tiny3_dir):
    d = tmp_path / "broken"
    shutil.copytree(tiny3_dir, d)
    path = d / "covariates.csv"
    path.write_text(path.read_text().replace("0.004", "none").replace("32000", "-5"))
    return d


def test_bad_csv_exits_2_with_errors(tmp_path, tiny3_dir, capsys):
    code = run("ingest", "--data-dir", broken_copy(tmp_path, tiny3_dir), "--origin", "LON",
               "--out", tmp_path / "x.json")
    assert code == 2
    err = capsys.readouterr().err
    assert "covariates.csv:4 [beds_per_capita] ParseError" in err
    assert not (tmp_path / "x.json").exists()


def test_json_errors_one_object_per_line(tmp_path, tiny3_dir, capsys):
    code = run("ingest", "--data-dir", broken_copy(tmp_path, tiny3_dir), "--origin", "LON",
               "--json", "--out", tmp_path / "x.json")
    assert code == 2
    lines = [l for l in capsys.readouterr().err.splitlines() if l.strip()]
    records = [json.loads(l) for l in lines]
    assert len(records) >= 3
    assert all({"kind", "message", "file", "line", "column"} <= set(r) for r in records)


def test_usage_errors_exit_4(tmp_path, tiny3_dir):
    assert run("ingest", "--data-dir", tiny3_dir, "--out", tmp_path / "x.json") == 4
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == 4


def test_config_file_and_flag_precedence(tmp_path, tiny3_dir):
    conf = tmp_path / "ingest.conf"
    conf.write_text("# defaults for this dataset\norigin = LON\nbed-adjust = none\n")
    out = tmp_path / "a.json"
    assert run("ingest", "--data-dir", tiny3_dir, "--config", conf, "--out", out) == 0
    meta = json.loads(out.with_name("a.json.manifest.json").read_text())
    assert meta["options"]["bed_adjust"] == "none"
    out = tmp_path / "b.json"
    assert run("ingest", "--data-dir", tiny3_dir, "--config", conf, "--bed-adjust", "misuse",
               "--out", out) == 0
    meta = json.loads(out.with_name("b.json.manifest.json").read_text())
    assert meta["options"] == {"origin": "LON", "bed_adjust": "misuse", "population_year": None}


# -- run ---------------------------------------------------------------------------------


def test_run_single_spec(tmp_path, synth_bundle):
    assert run("run", "--bundle", synth_bundle, "--specs", "9", "--out", tmp_path) == 0
    (row,) = read_rows(tmp_path / "results.csv")
    assert (row["spec_id"], row["family"], row["loss"], row["mask"]) == (
        "9", "Retail", "Poisson", "knife_crime")
    assert row["param_b"] == "" and float(row["param_beta"]) > 0
    assert 0 <= float(row["S_2019"]) <= 1 and row["rank"] == "1" and row["status"] == "ok"


def test_results_header(tmp_path, synth_bundle):
    assert run("run", "--bundle", synth_bundle, "--specs", "1-2", "--out", tmp_path) == 0
    with open(tmp_path / "results.csv") as fh:
        header = fh.readline().strip().split(",")
    for col in ("spec_id", "family", "loss", "mask", "train_year", "param_rho", "se_beta",
                "S_2019", "S_2020", "S_mean", "BIC", "BIC_textbook", "log_MSE", "rank"):
        assert col in header
    assert header.index("S_2019") < header.index("S_2020") < header.index("S_mean")


def test_run_is_repeatable_and_job_count_free(tmp_path, synth_bundle, monkeypatch):
    assert run("run", "--bundle", synth_bundle, "--specs", "1-6,40", "--out", tmp_path / "a") == 0
    monkeypatch.setenv("SPATIALFLOW_JOBS", "2")
    assert run("run", "--bundle", synth_bundle, "--specs", "40,1-6", "--out", tmp_path / "b") == 0
    a = (tmp_path / "a" / "results.csv").read_bytes()
    assert a == (tmp_path / "b" / "results.csv").read_bytes()
    assert [r["spec_id"] for r in read_rows(tmp_path / "a" / "results.csv")] == [
        "1", "2", "3", "4", "5", "6", "40"]


def test_run_rank_key_and_lambda_are_recorded(tmp_path, synth_bundle):
    conf = tmp_path / "run.conf"
    conf.write_text("lambda = 0\nrank_by = bic\n")
    assert run("run", "--bundle", synth_bundle, "--specs", "5-7", "--config", conf,
               "--lambda", "0.5", "--out", tmp_path) == 0
    meta = json.loads((tmp_path / "results.csv.manifest.json").read_text())
    assert meta["options"]["lam"] == 0.5 and meta["options"]["rank_by"] == "bic"
    rows = sorted(read_rows(tmp_path / "results.csv"), key=lambda r: int(r["rank"]))
    bics = [float(r["BIC"]) for r in rows]
    assert bics == sorted(bics)


def test_failed_spec_exit_codes(tmp_path, synth_bundle, monkeypatch):
    from spatialflow import select

    def boom(spec, *a, **k):
        if spec.spec_id == 2:
            raise FloatingPointError("synthetic failure")
        return real(spec, *a, **k)

    real = select.cross_validate
    monkeypatch.setattr(select, "cross_validate", boom)
    assert run("run", "--bundle", synth_bundle, "--specs", "1,2", "--out", tmp_path / "a") == 3
    assert run("run", "--bundle", synth_bundle, "--specs", "1,2", "--keep-going",
               "--out", tmp_path / "b") == 0
    rows = read_rows(tmp_path / "b" / "results.csv")
    assert rows[1]["status"].startswith("error") and rows[1]["BIC"] == "nan"
    assert rows[1]["rank"] == "2"


def test_run_rejects_unknown_spec(tmp_path, synth_bundle):
    assert run("run", "--bundle", synth_bundle, "--specs", "70", "--out", tmp_path) == 4
    assert run("run", "--bundle", tmp_path / "none.json", "--out", tmp_path) == 2


# -- export ------------------------------------------------------------------------------


@pytest.fixture
def tiny_results(tmp_path, tiny_bundle):
    assert run("run", "--bundle", tiny_bundle, "--specs", "2", "--out", tmp_path / "r") == 0
    return tmp_path / "r" / "results.csv"


def boundaries(path, codes):
    fc = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"code": c},
         "geometry": {"type": "Point", "coordinates": [i, i]}} for i, c in enumerate(codes)]}
    path.write_text(json.dumps(fc))
    return path


def test_export_geojson(tmp_path, tiny_bundle, tiny_results):
    b = boundaries(tmp_path / "b.geojson", ["AAA", "BBB", "LON"])
    out = tmp_path / "map.geojson"
    assert run("export", "--bundle", tiny_bundle, "--results", tiny_results, "--spec", "2",
               "--year", "2020", "--geojson", out, "--boundaries", b) == 0
    fc = json.loads(out.read_text())
    assert fc["type"] == "FeatureCollection"
    props = [f["properties"] for f in fc["features"]]
    assert [p["code"] for p in props] == ["AAA", "BBB"]
    assert sum(p["modelled"] for p in props) == pytest.approx(sum(p["observed"] for p in props))
    for p in props:
        assert p["diff"] == p["modelled"] - p["observed"]
        assert set(p) == {"code", "name", "observed", "modelled", "diff", "excluded_from_logmse"}
    assert [p["excluded_from_logmse"] for p in props] == [False, True]
    assert fc["features"][1]["geometry"]["coordinates"] == [1, 1]


def test_export_dispersion_sorted(tmp_path, tiny_bundle, tiny_results):
    out = tmp_path / "disp.csv"
    assert run("export", "--bundle", tiny_bundle, "--results", tiny_results, "--spec", "2",
               "--year", "2019", "--dispersion", out) == 0
    rows = read_rows(out)
    assert list(rows[0]) == ["code", "observed", "modelled"]
    assert [r["code"] for r in rows] == ["AAA", "BBB"]
    assert [float(r["observed"]) for r in rows] == [12.0, 8.0]


def test_export_errors(tmp_path, tiny_bundle, tiny_results):
    b = boundaries(tmp_path / "b.geojson", ["AAA"])
    args = ["export", "--bundle", tiny_bundle, "--results", tiny_results]
    assert run(*args, "--spec", "2", "--geojson", tmp_path / "m.json", "--boundaries", b) == 2
    assert run(*args, "--spec", "2", "--geojson", tmp_path / "m.json") == 2
    assert run(*args, "--spec", "5", "--dispersion", tmp_path / "d.csv") == 4
    assert run(*args, "--spec", "2") == 4


# -- share ---------------------------------------------------------------------------------


def test_share(tmp_path, tiny_bundle, capsys):
    subset = tmp_path / "south.txt"
    subset.write_text("AAA  # the only one\n")
    assert run("share", "--bundle", tiny_bundle, "--subset-file", subset) == 0
    assert capsys.readouterr().out.splitlines() == ["2019: 60.00", "2020: 100.00"]
    subset.write_text("AAA,BBB\n")
    assert run("share", "--bundle", tiny_bundle, "--subset-file", subset) == 0
    assert capsys.readouterr().out.splitlines() == ["2019: 100.00", "2020: 100.00"]
    subset.write_text("AAA\nXYZ\n")
    assert run("share", "--bundle", tiny_bundle, "--subset-file", subset) == 2
    assert "XYZ" in capsys.readouterr().err


# -- synth and entry point -----------------------------------------------------------------


def test_synth_then_ingest(tmp_path):
    assert run("synth", "--territories", "6", "--seed", "3", "--family", "Gravity",
               "--out", tmp_path / "d") == 0
    assert run("ingest", "--data-dir", tmp_path / "d", "--origin", "T00",
               "--out", tmp_path / "b.json") == 0
    assert len(read_rows(tmp_path / "d" / "flows.csv")) == 10


def test_module_entry_point(tmp_path, synth_bundle):
    proc = subprocess.run([sys.executable, "-m", "spatialflow", "run", "--bundle",
                           str(synth_bundle), "--specs", "2", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "1 rows" in proc.stdout
