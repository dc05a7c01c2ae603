"""CLI: subcommands, exit codes, file outputs, reproducibility."""

import json
from pathlib import Path

import pytest

from attnplane.cli import EXIT_BUDGET, EXIT_OK, EXIT_THEORY, main


def run(args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def small_trace(tmp_path_factory):
    out = tmp_path_factory.mktemp("trace")
    assert run(["generate", "--set", "workload.flows=40", "--deterministic",
                "--out", out]) == EXIT_OK
    return out / "trace.csv"


def test_generate_outputs(small_trace):
    assert small_trace.exists()
    meta = json.loads((small_trace.parent / "trace_meta.json").read_text())
    assert meta["flows"] == 40
    assert "config_hash" in meta and "generated_at" not in meta


def test_generate_byte_identical(tmp_path, small_trace):
    assert run(["generate", "--set", "workload.flows=40", "--deterministic",
                "--out", tmp_path]) == EXIT_OK
    assert (tmp_path / "trace.csv").read_bytes() == small_trace.read_bytes()


def test_simulate_and_score_roundtrip(tmp_path, small_trace):
    out = tmp_path / "sim"
    assert run(["simulate", "--trace", small_trace, "--preset", "cascade",
                "--deterministic", "--out", out]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["preset"] == "cascade"
    assert 0.0 <= summary["metrics"]["macro_f1"] <= 1.0
    assert summary["budget"]["all_ok"]
    lines = (out / "packets.jsonl").read_text().splitlines()
    assert len(lines) == summary["packets"]
    rec = json.loads(lines[0])
    assert {"score", "path", "n_t", "stage_use", "table_version"} <= set(rec)
    plot = (out / "plotdata.csv").read_text().splitlines()
    assert plot[0] == "bits_per_flow,window,macro_f1"

    score_out = tmp_path / "score"
    assert run(["score", "--pred", out / "packets.jsonl", "--deterministic",
                "--out", score_out]) == EXIT_OK
    metrics = json.loads((score_out / "metrics.json").read_text())
    assert metrics["metrics"]["macro_f1"] == pytest.approx(
        summary["metrics"]["macro_f1"])


def test_simulate_deterministic_reruns(tmp_path, small_trace):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["simulate", "--trace", small_trace, "--preset", "hybrid",
                    "--deterministic", "--out", out]) == EXIT_OK
    for name in ("summary.json", "packets.jsonl", "plotdata.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_resources_exit_codes(tmp_path, capsys):
    assert run(["resources", "-m", "4", "--d-v", "2", "-b", "16"]) == EXIT_OK
    capsys.readouterr()
    # infeasible configuration is only an error under strict mode
    assert run(["resources", "-m", "256", "--d-v", "64", "-b", "16"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "262144" in out and "INFEASIBLE" in out
    assert run(["resources", "-m", "256", "--d-v", "64", "-b", "16",
                "--set", "resources.mode=strict-hw"]) == EXIT_BUDGET


def test_theory_check_exit_code_and_json(tmp_path):
    out = tmp_path / "t"
    assert run(["theory-check", "--which", "ema", "--deterministic",
                "--out", out]) == EXIT_OK
    rep = json.loads((out / "theory.json").read_text())
    assert rep["checks"][0]["name"] == "ema" and rep["checks"][0]["passed"]


def test_theory_check_failure_exit_code(monkeypatch, capsys):
    from attnplane import cli
    from attnplane.theory import CheckResult

    def fake_run_checks(which, seed=0):
        return [CheckResult(name="kernel", passed=False,
                            measured={"failure_fraction": 0.5},
                            bound={"allowed_fraction": 0.1})]

    monkeypatch.setattr(cli, "run_checks", fake_run_checks)
    assert run(["theory-check", "--which", "kernel"]) == EXIT_THEORY
    assert "[FAIL] kernel" in capsys.readouterr().out


def test_control_loop_outputs(tmp_path):
    out = tmp_path / "cl"
    assert run(["control-loop", "--t-cp", "0.5", "--horizon", "3000",
                "--occupancy", "step", "--deterministic", "--out", out]) == EXIT_OK
    rep = json.loads((out / "stability.json").read_text())
    assert rep["install_count"] >= 1
    assert rep["skipped_below_threshold"] >= 1
    traj = (out / "trajectory.csv").read_text().splitlines()
    assert traj[0] == "t,v,table_version"
    assert len(traj) == 3001


def test_fit_and_compile_pipeline(tmp_path, small_trace):
    fit_out = tmp_path / "fit"
    assert run(["fit-rules", "--trace", small_trace, "--deterministic",
                "--out", fit_out]) == EXIT_OK
    rules_file = fit_out / "rules.txt"
    assert rules_file.exists()
    comp_out = tmp_path / "comp"
    assert run(["compile-tables", "--rules", rules_file, "--deterministic",
                "--out", comp_out]) == EXIT_OK
    table = (comp_out / "compiled_table.txt").read_text()
    assert table.startswith("# compiled rule table")
    # too-small budget fails with the budget exit code
    assert run(["compile-tables", "--rules", rules_file, "--budget", "8",
                "--deterministic", "--out", tmp_path / "c2"]) == EXIT_BUDGET


def test_simulate_with_external_global_index(tmp_path, small_trace):
    sim1 = tmp_path / "sim1"
    assert run(["simulate", "--trace", small_trace, "--preset", "global-only",
                "--deterministic", "--out", sim1]) == EXIT_OK
    # export the trained index by re-deriving it, then wire it back in
    from attnplane.config import experiment_config, load_config
    from attnplane.experiments import train
    from attnplane.workload import from_csv, split_by_flow
    cfg = load_config(overrides=["workload.flows=40"])
    packets, d, d_v = from_csv(Path(small_trace).read_text())
    tr, _, _ = split_by_flow(packets, seed=cfg["seed"])
    art = train(tr, d, d_v, experiment_config(cfg))
    idx_file = tmp_path / "index.tbl"
    art.global_index.save(idx_file)
    sim2 = tmp_path / "sim2"
    assert run(["simulate", "--trace", small_trace, "--preset", "global-only",
                "--global-index", idx_file, "--deterministic", "--out", sim2]) == EXIT_OK
    s1 = json.loads((sim1 / "summary.json").read_text())
    s2 = json.loads((sim2 / "summary.json").read_text())
    assert s2["metrics"]["macro_f1"] == pytest.approx(s1["metrics"]["macro_f1"])
