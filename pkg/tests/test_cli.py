import json
import subprocess
import sys

import pytest

from abidlm.cli import main
from abidlm.conjugate import normal_gamma_posterior
from abidlm.dlm import DlmSpec, DrawSet, read_observations
from abidlm.evaluate import INTERVAL_FIELDS, read_intervals
from abidlm.flow import load_checkpoint


def run(*argv):
    assert main([str(a) for a in argv]) == 0


def outputs(directory):
    """File bytes under a run directory, manifest excluded."""
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(directory.rglob("*")) if p.is_file() and p.name != "run_manifest.json"}


def test_simulate_is_idempotent(tmp_path):
    for name in ("a", "b"):
        run("simulate", "--T", 3, "--p", 2, "--n", "2,0,3", "--seed", 4, "--out-dir", tmp_path / name)
    a, b = outputs(tmp_path / "a"), outputs(tmp_path / "b")
    assert a == b and set(a) == {"spec.json", "truth.csv", "observations.csv"}
    spec = DlmSpec.load(tmp_path / "a" / "spec.json")
    assert spec.n == [2, 0, 3] and (spec.a0, spec.b0) == (3.0, 1.0)
    manifest = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["seed"] == 4
    assert len(manifest["outputs"]) == 3 and "duration_s" in manifest


def test_t1_simulate_then_ffbs_matches_oracle(tmp_path):
    run("simulate", "--T", 1, "--p", 2, "--n", 5, "--seed", 1, "--out-dir", tmp_path)
    run("ffbs", "--spec", tmp_path / "spec.json", "--data", tmp_path / "observations.csv", "--L", 100,
        "--seed", 2, "--out-dir", tmp_path / "f")
    spec = DlmSpec.load(tmp_path / "spec.json")
    y = read_observations(tmp_path / "observations.csv", spec)
    G, W = spec.G[0], spec.W[0]
    post = normal_gamma_posterior(spec.X[0], y[0], spec.V[0], G @ spec.m0, G @ spec.M0 @ G.T + W, spec.a0, spec.b0)
    rows = read_intervals(tmp_path / "f" / "intervals.csv")
    assert {r.source for r in rows} == {"FF", "FFBS"}
    for r in rows:
        assert r.mean == pytest.approx(post.m[int(r.coef) - 1], abs=1e-10)
    assert len(DrawSet.load(tmp_path / "f" / "draws.npz")) == 100
    header = (tmp_path / "f" / "intervals.csv").read_text().splitlines()[0]
    assert header.split(",") == INTERVAL_FIELDS


def test_ffbs_is_deterministic(tmp_path):
    run("simulate", "--T", 3, "--p", 2, "--n", 3, "--out-dir", tmp_path)
    for name in ("a", "b"):
        run("ffbs", "--spec", tmp_path / "spec.json", "--data", tmp_path / "observations.csv", "--L", 50,
            "--seed", 9, "--out-dir", tmp_path / name)
    assert outputs(tmp_path / "a") == outputs(tmp_path / "b")


def test_train_sample_evaluate_pipeline(tmp_path):
    run("simulate", "--T", 3, "--p", 1, "--n", 2, "--seed", 3, "--out-dir", tmp_path)
    spec, data = tmp_path / "spec.json", tmp_path / "observations.csv"
    train = ["train", "--spec", spec, "--block-sizes", "1,2", "--n-iter", 30, "--batch-size", 8, "--hidden", 8,
             "--seed", 5, "--out-dir", tmp_path / "t"]
    run(*train)
    ckpts = sorted((tmp_path / "t" / "checkpoints").glob("block_*.json"))
    assert [c.name for c in ckpts] == ["block_001.json", "block_002.json"]
    manifest = json.loads((tmp_path / "t" / "run_manifest.json").read_text())
    assert all(str(c) in manifest["outputs"] for c in ckpts)
    trace = (tmp_path / "t" / "traces" / "block_001.csv").read_text().splitlines()
    assert trace[0] == "iteration,loss,grad_norm,lr" and len(trace) == 31
    before = ckpts[0].read_bytes()
    run(*train)  # resumes: finished blocks are reused untouched
    assert ckpts[0].read_bytes() == before
    assert load_checkpoint(ckpts[1]).meta["block"] == [2, 3]

    for name in ("s1", "s2"):
        run("sample", "--spec", spec, "--data", data, "--checkpoints", tmp_path / "t" / "checkpoints", "--L", 200,
            "--seed", 6, "--out-dir", tmp_path / name)
    assert outputs(tmp_path / "s1") == outputs(tmp_path / "s2")
    abi = read_intervals(tmp_path / "s1" / "intervals.csv")
    assert {r.source for r in abi} == {"ABI"} and len(abi) == 3

    run("ffbs", "--spec", spec, "--data", data, "--L", 10, "--out-dir", tmp_path / "f")
    run("evaluate", "--intervals", tmp_path / "f" / "intervals.csv", tmp_path / "s1" / "intervals.csv",
        "--truth", tmp_path / "truth.csv", "--out-dir", tmp_path / "e")
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert {s["source"] for s in report["sources"]} == {"FF", "FFBS", "ABI"}
    assert "width_ratio_abi_ffbs" in report


def test_sample_rejects_mismatched_checkpoints(tmp_path, capsys):
    run("simulate", "--T", 2, "--p", 1, "--n", 2, "--out-dir", tmp_path / "a")
    run("simulate", "--T", 2, "--p", 1, "--n", 3, "--out-dir", tmp_path / "b")
    run("train", "--spec", tmp_path / "a" / "spec.json", "--n-iter", 2, "--hidden", 4, "--out-dir", tmp_path / "t")
    code = main(["sample", "--spec", str(tmp_path / "b" / "spec.json"), "--data", str(tmp_path / "b" / "observations.csv"),
                 "--checkpoints", str(tmp_path / "t" / "checkpoints"), "--out-dir", str(tmp_path / "s")])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FlowError" and "dims" in err["message"]


def test_timesheet_and_impute(tmp_path):
    run("timesheet", "--subjects", 6, "--seed", 2, "--out-dir", tmp_path)
    bundle = tmp_path / "bundle"
    assert (bundle / "manifest.json").exists() and (bundle / "outcomes.csv").exists()
    spec = DlmSpec.load(tmp_path / "spec.json")
    assert spec.T == 61
    run("ffbs", "--spec", tmp_path / "spec.json", "--data", tmp_path / "observations.csv", "--L", 200,
        "--out-dir", tmp_path / "f")
    run("impute", "--bundle", bundle, "--draws", tmp_path / "f" / "draws.npz", "--coverage-check", "--L", 300,
        "--out-dir", tmp_path / "i")
    report = json.loads((tmp_path / "i" / "imputation_report.json").read_text())
    assert report["r_s"] == 200.0 and report["cells"] > 0 and 0 <= report["coverage"] <= 1
    lines = (tmp_path / "i" / "imputed_outcomes.csv").read_text().splitlines()
    assert lines[0] == "subject_id,date,start,t,lower,mean,upper" and len(lines) == report["cells"] + 1
    assert json.loads((tmp_path / "i" / "run_manifest.json").read_text())["r_s"] == 200.0


def test_config_file_defaults_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"simulate": {"T": 2, "p": 3, "n": 4}}))
    run("simulate", "--config", cfg, "--p", 1, "--out-dir", tmp_path / "o")
    spec = DlmSpec.load(tmp_path / "o" / "spec.json")
    assert (spec.T, spec.p, spec.n) == (2, 1, [4, 4])


def test_errors_are_json(tmp_path, capsys):
    assert main(["ffbs", "--spec", str(tmp_path / "missing.json"), "--data", "x", "--out-dir", str(tmp_path)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert "error" in err and "message" in err
    run("simulate", "--T", 2, "--p", 1, "--n", 1, "--out-dir", tmp_path)
    (tmp_path / "truth_bad.csv").write_text("t,coef,value\n9,1,0.0\n")
    run("ffbs", "--spec", tmp_path / "spec.json", "--data", tmp_path / "observations.csv", "--L", 1,
        "--out-dir", tmp_path / "f")
    assert main(["evaluate", "--intervals", str(tmp_path / "f" / "intervals.csv"), "--truth",
                 str(tmp_path / "truth_bad.csv"), "--out-dir", str(tmp_path / "e")]) == 1
    assert "truth" in json.loads(capsys.readouterr().err)["message"]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "abidlm.cli", "simulate", "--T", "1", "--p", "1", "--n", "1",
                           "--out-dir", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    bad = subprocess.run([sys.executable, "-m", "abidlm.cli", "ffbs", "--spec", "nope.json", "--data", "nope.csv",
                          "--out-dir", str(tmp_path)], capture_output=True, text=True)
    assert bad.returncode == 1 and json.loads(bad.stderr)["error"]
