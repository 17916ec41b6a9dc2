import json
import subprocess
import sys

import pandas as pd
import pytest

from cthmm_rj.cli import main
from cthmm_rj.summary import read_trace


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), (json.loads(err) if err.strip() else None)


@pytest.fixture
def toy_csv(tmp_path):
    path = tmp_path / "toy.csv"
    pd.DataFrame({"subject_id": ["a"] * 5, "time": [0.0, 0.7, 1.5, 2.2, 4.0],
                  "outcome": [0.1, 2.9, 3.2, -0.2, 0.3]}).to_csv(path, index=False)
    return path


@pytest.fixture
def pair_csv(tmp_path, capsys):
    code, res, _ = run(capsys, "simulate", "--preset", "ex5_4_pair", "--seed", 5, "--subjects", 6, 6,
                       "-o", tmp_path / "data")
    assert code == 0
    return res["data"]


@pytest.fixture
def model_json(tmp_path):
    path = tmp_path / "model.json"
    path.write_text(json.dumps({"family": "gaussian", "sigma": 1.0,
                                "prior": {"intercept_prior": {"kind": "normal", "loc": 0.0, "scale": 10.0}}}))
    return path


# ---------------------------------------------------------------- simulate

def test_simulate_preset_subject_count(tmp_path, capsys):
    code, res, _ = run(capsys, "simulate", "--preset", "ex5_3", "--seed", 7, "-o", tmp_path)
    assert code == 0 and res["subjects"] == 1000
    df = pd.read_csv(res["data"])
    assert list(df.columns) == ["subject_id", "time", "outcome"]
    assert df["subject_id"].nunique() == 1000
    truth = json.loads((tmp_path / "ex5_3_truth.json").read_text())
    assert len(truth["truth"]["paths"]) == 1000 and truth["scenario"]["seed"] == 7


def test_simulate_is_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "simulate", "--preset", "ex5_1", "--seed", 3, "--subjects", 10, "-o", tmp_path / d)[0] == 0
    for name in ("ex5_1.csv", "ex5_1_truth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert list(pd.read_csv(tmp_path / "a" / "ex5_1.csv").columns) == ["subject_id", "time", "outcome", "z1", "z2"]


def test_simulate_requires_seed(tmp_path, capsys):
    code, _, err = run(capsys, "simulate", "--preset", "ex5_3", "-o", tmp_path)
    assert code == 2 and err["error"] == "usage" and "seed" in err["message"]


def test_simulate_malformed_config_names_field(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"name": "bad", "family": "gaussian", "covariates": [{"law": "normal"}],
                               "components": [{"Q": [[0.0]], "pi": [1.0], "B": [[0.0]], "n_subjects": 2}]}))
    code, _, err = run(capsys, "simulate", "--config", cfg, "--seed", 1, "-o", tmp_path)
    assert code == 1 and "components[0]" in err["message"]


def test_simulate_unknown_preset(tmp_path, capsys):
    code, _, err = run(capsys, "simulate", "--preset", "nope", "--seed", 1, "-o", tmp_path)
    assert code == 1 and "nope" in err["message"]


# ---------------------------------------------------------------- fit

def test_fit_toy_data(tmp_path, capsys, toy_csv, model_json):
    out = tmp_path / "run"
    code, res, _ = run(capsys, "fit", "--data", toy_csv, "--config", model_json, "--iterations", 100,
                       "--seed", 4, "-o", out)
    assert code == 0 and res["records"] == 100
    trace = read_trace(out / "trace.jsonl")
    assert len(trace) == 100 and [r["iteration"] for r in trace] == list(range(100))
    table = pd.read_csv(out / "posterior_k.csv")
    assert list(table.columns) == ["k", "posterior_probability"]
    assert abs(table["posterior_probability"].sum() - 1.0) < 1e-12
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 4 and manifest["sampler"] == "rj" and len(manifest["data_sha256"]) == 64


def test_fit_rerun_from_manifest(tmp_path, capsys, toy_csv, model_json):
    a = tmp_path / "a"
    assert run(capsys, "fit", "--data", toy_csv, "--config", model_json, "--sampler", "bd", "--iterations", 40,
               "--thin", 2, "--seed", 9, "-o", a)[0] == 0
    b = tmp_path / "b"
    assert run(capsys, "fit", "--manifest", a / "manifest.json", "-o", b)[0] == 0
    assert (a / "trace.jsonl").read_bytes() == (b / "trace.jsonl").read_bytes()
    assert len(read_trace(b / "trace.jsonl")) == 20


def test_manifest_detects_changed_data(tmp_path, capsys, toy_csv, model_json):
    a = tmp_path / "a"
    run(capsys, "fit", "--data", toy_csv, "--config", model_json, "--iterations", 5, "--seed", 1, "-o", a)
    toy_csv.write_text(toy_csv.read_text().replace("0.1", "0.2"))
    code, _, err = run(capsys, "fit", "--manifest", a / "manifest.json", "-o", tmp_path / "b")
    assert code == 1 and "digest" in err["message"]


def test_fit_requires_seed(capsys, toy_csv):
    code, _, err = run(capsys, "fit", "--data", toy_csv, "--iterations", 5)
    assert code == 2 and "seed" in err["message"]


def test_fit_dimension_mismatch(tmp_path, capsys, toy_csv):
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps({"family": "gaussian", "theta_init": {"pi": [1.0], "Q": [[0.0]], "B": [[0.0], [1.0]]}}))
    code, _, err = run(capsys, "fit", "--data", toy_csv, "--config", cfg, "--iterations", 5, "--seed", 1,
                       "-o", tmp_path / "r")
    assert code == 1 and err["error"] == "StructuralError" and "covariates" in err["message"]


def test_fit_reports_impossible_subject(tmp_path, capsys):
    data = tmp_path / "d.csv"
    pd.DataFrame({"subject_id": ["ok", "ok", "bad", "bad", "bad"], "time": [0, 1, 0, 1, 2],
                  "outcome": [0.0, 0.1, 0.0, 0.1, 100.0]}).to_csv(data, index=False)
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps({"family": "gaussian", "sigma": 0.01,
                               "theta_init": {"pi": [1.0, 0.0], "Q": [[0.0, 0.0], [0.0, 0.0]], "B": [[0.0, 100.0]]}}))
    code, _, err = run(capsys, "fit", "--data", data, "--config", cfg, "--iterations", 5, "--seed", 1,
                       "-o", tmp_path / "r")
    assert code == 1 and err["error"] == "LikelihoodImpossibleError" and err["subject"] == "bad"


def test_fit_unknown_config_field(tmp_path, capsys, toy_csv):
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps({"family": "gaussian", "priors": {}}))
    code, _, err = run(capsys, "fit", "--data", toy_csv, "--config", cfg, "--seed", 1)
    assert code == 1 and "priors" in err["message"]


def test_fit_bad_burn_in(capsys, toy_csv):
    code, _, err = run(capsys, "fit", "--data", toy_csv, "--iterations", 5, "--burn-in", 5, "--seed", 1)
    assert code == 2 and err["error"] == "usage"


# ---------------------------------------------------------------- cluster-fit

def test_cluster_fit_outputs(tmp_path, capsys, pair_csv, model_json):
    out = tmp_path / "c"
    code, res, _ = run(capsys, "cluster-fit", "--data", pair_csv, "--config", model_json, "--iterations", 15,
                       "--m-init", 2, "--seed", 2, "-o", out)
    assert code == 0 and res["records"] == 15
    trace = read_trace(out / "trace.jsonl")
    assert all(len(r["K"]) == r["M"] and sum(r["counts"]) == 12 for r in trace)
    members = pd.read_csv(out / "membership.csv")
    assert members["mean_subjects"].sum() == pytest.approx(12)
    for name in ("posterior_m.csv", "posterior_m_filled.csv"):
        assert abs(pd.read_csv(out / name)["posterior_probability"].sum() - 1.0) < 1e-12
    counts = pd.read_csv(out / "state_counts.csv")
    assert list(counts.columns) == ["M", "state_counts", "conditional_probability", "posterior_probability"]


def test_cluster_fit_rerun_determinism(tmp_path, capsys, pair_csv, model_json):
    a, b = tmp_path / "a", tmp_path / "b"
    run(capsys, "cluster-fit", "--data", pair_csv, "--config", model_json, "--iterations", 8, "--seed", 6, "-o", a)
    assert run(capsys, "cluster-fit", "--manifest", a / "manifest.json", "-o", b)[0] == 0
    assert (a / "trace.jsonl").read_bytes() == (b / "trace.jsonl").read_bytes()


def test_manifest_command_must_match(tmp_path, capsys, toy_csv, model_json):
    a = tmp_path / "a"
    run(capsys, "fit", "--data", toy_csv, "--config", model_json, "--iterations", 3, "--seed", 1, "-o", a)
    code, _, err = run(capsys, "cluster-fit", "--manifest", a / "manifest.json", "-o", tmp_path / "b")
    assert code == 2 and "fit" in err["message"]


# ---------------------------------------------------------------- summarize

def test_summarize_tables(tmp_path, capsys, toy_csv, model_json):
    r = tmp_path / "r"
    run(capsys, "fit", "--data", toy_csv, "--config", model_json, "--iterations", 30, "--seed", 3, "-o", r)
    code, res, _ = run(capsys, "summarize", "--trace", r / "trace.jsonl", "--burn-in", 10, "-o", tmp_path / "s")
    assert code == 0 and res["records"] == 20
    assert set(res["tables"]) == {"trace", "posterior_k", "parameters"}
    params = pd.read_csv(tmp_path / "s" / "parameters.csv")
    assert list(params.columns) == ["K", "parameter", "mean", "lower", "upper", "n_draws"]
    assert (params["lower"] <= params["mean"]).all() and (params["mean"] <= params["upper"]).all()
    assert len(pd.read_csv(tmp_path / "s" / "trace.csv")) == 20


def test_summarize_burn_in_too_long(tmp_path, capsys, toy_csv, model_json):
    r = tmp_path / "r"
    run(capsys, "fit", "--data", toy_csv, "--config", model_json, "--iterations", 5, "--seed", 3, "-o", r)
    code, _, err = run(capsys, "summarize", "--trace", r / "trace.jsonl", "--burn-in", 5, "-o", tmp_path / "s")
    assert code == 1 and "no records" in err["message"]


def test_summarize_empty_trace(tmp_path, capsys):
    t = tmp_path / "t.jsonl"
    t.write_text("")
    code, _, err = run(capsys, "summarize", "--trace", t)
    assert code == 1 and "empty" in err["message"]


# ---------------------------------------------------------------- entry point

def test_console_script_lists_presets():
    proc = subprocess.run([sys.executable, "-m", "cthmm_rj.cli", "presets"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "ex5_3" in json.loads(proc.stdout)


def test_unknown_command_is_usage_error(capsys):
    code, _, err = run(capsys, "launch")
    assert code == 2 and err["error"] == "usage"
