import csv

import pytest
import yaml

from conftest import DATA, DEDUCTIBLE_SCHEMA
from ratematch.cli import WORKERS_ENV, load_config, main
from synthetic import SCHEMA, write_csv


def write_config(tmp_path, data, schema, **sections):
    cfg = {"data": str(data), "schema": schema, **sections}
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return path


def run(*args):
    return main([str(a) for a in args])


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def deductible_config(tmp_path):
    return write_config(tmp_path, DATA / "deductible.csv", DEDUCTIBLE_SCHEMA,
                        years={"target": 1, "comparison": 0},
                        match={"methods": ["classic", "complete"], "replace": True, "propensity": False},
                        estimate={"methods": ["naive", "classic", "complete"]},
                        bootstrap={"n_replicates": 200})


@pytest.fixture(scope="module")
def synthetic_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("syn") / "motor.csv"
    write_csv(path, 1500, 21)
    return path


def test_deductible_match(tmp_path, deductible_config, capsys):
    out = tmp_path / "out"
    assert run("match", "--config", deductible_config, "--out", out, "--workers", 1) == 0
    pairs = {r["target_id"]: r["comparison_id"] for r in rows(out / "matched_classic.csv")}
    assert {t: pairs[t] for t in "abcdeghi"} == dict(zip("abcdeghi", "abceeghi"))
    assert pairs["k"] in "dfhj" and pairs["l"] in "bcg"
    assert rows(out / "drops_classic.csv") == []
    assert "drop rate 0.0000" in capsys.readouterr().out


def test_missing_data_file(tmp_path, capsys):
    cfg = write_config(tmp_path, tmp_path / "absent.csv", DEDUCTIBLE_SCHEMA)
    assert run("match", "--config", cfg, "--out", tmp_path / "o") != 0
    err = capsys.readouterr().err
    assert err.startswith("error: ") and "absent.csv" in err and err.count("\n") == 1


def test_missing_config_and_bad_keys(tmp_path, capsys):
    assert run("match", "--config", tmp_path / "none.yaml") != 0
    assert "none.yaml" in capsys.readouterr().err
    cfg = write_config(tmp_path, DATA / "deductible.csv", DEDUCTIBLE_SCHEMA, matching={"x": 1})
    assert run("match", "--config", cfg) != 0
    assert "unknown key(s) in config: matching" in capsys.readouterr().err


def test_rerun_is_byte_identical(tmp_path, deductible_config):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        for cmd in ("ingest", "match", "estimate", "report"):
            assert run(cmd, "--config", deductible_config, "--out", d, "--workers", 1) == 0
    names = sorted(p.name for p in dirs[0].iterdir())
    assert names == sorted(p.name for p in dirs[1].iterdir())
    for n in names:
        assert (dirs[0] / n).read_bytes() == (dirs[1] / n).read_bytes(), n


def test_report(tmp_path, deductible_config):
    out = tmp_path / "out"
    assert run("report", "--config", deductible_config, "--out", out) != 0
    out.mkdir()
    assert run("report", "--config", deductible_config, "--out", out) != 0
    for cmd in ("match", "estimate", "report"):
        assert run(cmd, "--config", deductible_config, "--out", out, "--workers", 1) == 0
    text = (out / "summary.txt").read_text()
    assert "Covariate balance (p-values)" in text and "matched number" in text
    assert "Rate change estimates (%" in text and "naive" in text
    first = (out / "summary.txt").read_bytes()
    assert run("report", "--config", deductible_config, "--out", out) == 0
    assert (out / "summary.txt").read_bytes() == first
    qq = rows(out / "qq_classic_deductible.csv")
    assert len(qq) == 50 and all(r["target_after"] == r["comparison_after"] for r in qq)


def test_identical_premiums_zero_everywhere(tmp_path):
    data = tmp_path / "flat.csv"
    src = (DATA / "deductible.csv").read_text().splitlines()
    data.write_text("\n".join([src[0]] + [",".join(l.split(",")[:3] + ["100"]) for l in src[1:]]) + "\n")
    schema = {**DEDUCTIBLE_SCHEMA, "covariates": [{"name": "deductible", "kind": "numeric"}]}
    cfg = write_config(tmp_path, data, schema, years={"target": 1},
                       match={"methods": ["classic", "pscore", "complete"], "replace": True, "ties": "keep_all"},
                       bootstrap={"n_replicates": 100})
    assert run("estimate", "--config", cfg, "--out", tmp_path / "o", "--workers", 1) == 0
    est = rows(tmp_path / "o" / "estimates.csv")
    assert {r["method"] for r in est} == {"naive", "classic", "pscore", "complete", "regression", "ipw"}
    for r in est:
        # least squares and propensity weighting carry rounding error; the rest are exact
        tol = 1e-9 if r["method"] in ("regression", "ipw") else 0.0
        for key in ("point", "ci_low", "ci_high"):
            assert abs(float(r[key])) <= tol, r


def test_zero_comparison_premium_is_labeled(tmp_path, capsys):
    data = tmp_path / "zero.csv"
    src = (DATA / "deductible.csv").read_text().splitlines()
    body = [l if l.split(",")[1] == "1" else ",".join(l.split(",")[:3] + ["0"]) for l in src[1:]]
    data.write_text("\n".join([src[0]] + body) + "\n")
    cfg = write_config(tmp_path, data, DEDUCTIBLE_SCHEMA, years={"target": 1},
                       match={"methods": ["classic"], "replace": True, "propensity": False},
                       estimate={"methods": ["classic"]}, bootstrap={"n_replicates": 0})
    assert run("estimate", "--config", cfg, "--out", tmp_path / "o") != 0
    assert "coverage 'total'" in capsys.readouterr().err


def test_synthetic_pipeline(tmp_path, synthetic_csv, capsys):
    common = dict(years={"target": 2004, "comparison": 2003},
                  genmatch={"pop_size": 8, "max_generations": 4, "wait_generations": 2},
                  bootstrap={"n_replicates": 100})
    cfg = write_config(tmp_path, synthetic_csv, SCHEMA, **common)
    out1, out2 = tmp_path / "w1", tmp_path / "w2"
    assert run("genmatch", "--config", cfg, "--out", out1, "--workers", 1) == 0
    assert run("genmatch", "--config", cfg, "--out", out2, "--workers", 2) == 0
    assert (out1 / "weights.csv").read_bytes() == (out2 / "weights.csv").read_bytes()
    hist = rows(out1 / "ga_history.csv")
    assert len(hist) <= 4
    bal = [r for r in rows(out1 / "balance_computational.csv") if r["covariate"] != "matched number"]
    assert min(float(r["p_after"]) for r in bal) >= min(float(r["p_before"]) for r in bal)

    assert run("match", "--config", cfg, "--out", out1, "--workers", 1) == 0
    assert run("estimate", "--config", cfg, "--out", out1, "--workers", 1) == 0
    est = {r["method"]: r for r in rows(out1 / "estimates.csv")}
    assert "computational" in est
    for m in ("classic", "pscore", "computational", "regression", "ipw"):
        assert abs(float(est[m]["point"]) - 5.0) < 1.5, m
    assert float(est["naive"]["point"]) > 6.0
    assert run("report", "--config", cfg, "--out", out1) == 0
    assert "computational" in (out1 / "summary.txt").read_text()


def test_worker_resolution(tmp_path, deductible_config, monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert load_config(deductible_config).workers == 3
    assert load_config(deductible_config, workers=2).workers == 2
    monkeypatch.delenv(WORKERS_ENV)
    assert load_config(deductible_config).workers >= 1


def test_multi_year_output(tmp_path):
    src = (DATA / "deductible.csv").read_text().splitlines()
    extra = [l.replace(",1,", ",2,", 1) for l in src[11:]]
    data = tmp_path / "three.csv"
    data.write_text("\n".join(src + extra) + "\n")
    cfg = write_config(tmp_path, data, DEDUCTIBLE_SCHEMA, years={"target": 2, "comparison": 1},
                       match={"methods": ["classic"], "replace": True, "propensity": False},
                       estimate={"methods": ["naive"], "multi_year": True},
                       bootstrap={"n_replicates": 0})
    assert run("estimate", "--config", cfg, "--out", tmp_path / "o") == 0
    my = rows(tmp_path / "o" / "multi_year.csv")
    steps = [(r["method"], r["from_year"], r["to_year"]) for r in my]
    assert ("naive", "0", "2") in steps and ("matched", "1", "2") in steps
