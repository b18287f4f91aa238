import json
import math
import os
from pathlib import Path

import pytest
from click.testing import CliRunner

from matchq.cli import main

SMALL = {
    "suppliers": [{"rate": 2.0}],
    "customers": [{"rate": 1.0}, {"rate": 1.5}],
    "costs": [[0.2, 0.8]],
}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def instance_file(tmp_path):
    path = tmp_path / "inst.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_solve_single_queue(runner, instance_file, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(
        main,
        ["solve", "--instance", str(instance_file), "--tau", "1.0", "--eps", "0.2", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    report = json.loads((out / "report.json").read_text())
    assert report["pipeline"] == "dynamic_lp"
    assert report["config"]["eps"] == 0.2
    policy = json.loads((out / "policy.json").read_text())
    assert policy["type"] == "dlp_adaptive"


def test_solve_missing_file(runner, tmp_path):
    result = runner.invoke(main, ["solve", "--instance", str(tmp_path / "nope.json"), "--tau", "1"])
    assert result.exit_code == 3


def test_solve_infeasible_target(runner, instance_file, tmp_path):
    result = runner.invoke(
        main,
        ["solve", "--instance", str(instance_file), "--tau", "2.4", "--out", str(tmp_path / "x")],
    )
    assert result.exit_code == 2


def test_solve_rejects_overlong_tau(runner, instance_file, tmp_path):
    result = runner.invoke(
        main,
        ["solve", "--instance", str(instance_file), "--tau", "99", "--out", str(tmp_path / "x")],
    )
    assert result.exit_code == 3  # above tau_max: structurally invalid


def test_simulate_roundtrip_and_determinism(runner, instance_file, tmp_path):
    out = tmp_path / "out"
    assert (
        runner.invoke(
            main,
            ["solve", "--instance", str(instance_file), "--tau", "1.0", "--eps", "0.2", "--out", str(out)],
        ).exit_code
        == 0
    )
    args = [
        "simulate",
        "--instance", str(instance_file),
        "--policy", str(out / "policy.json"),
        "--horizon", "2000",
        "--seed", "3",
        "--out", str(out),
    ]
    assert runner.invoke(main, args).exit_code == 0
    first = (out / "metrics.csv").read_bytes()
    assert runner.invoke(main, args).exit_code == 0
    assert (out / "metrics.csv").read_bytes() == first  # byte-identical replay

    result = runner.invoke(main, args + ["--format", "json"])
    assert result.exit_code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["throughput_rate"] > 0


def test_simulate_bad_config(runner, instance_file, tmp_path):
    out = tmp_path / "out"
    runner.invoke(
        main,
        ["solve", "--instance", str(instance_file), "--tau", "1.0", "--eps", "0.2", "--out", str(out)],
    )
    result = runner.invoke(
        main,
        [
            "simulate",
            "--instance", str(instance_file),
            "--policy", str(out / "policy.json"),
            "--replications", "0",
            "--out", str(out),
        ],
    )
    assert result.exit_code == 3


def test_simulate_missing_policy(runner, instance_file, tmp_path):
    result = runner.invoke(
        main,
        ["simulate", "--instance", str(instance_file), "--policy", str(tmp_path / "no.json")],
    )
    assert result.exit_code == 3


def test_figure1_small(runner, tmp_path):
    result = runner.invoke(
        main,
        [
            "figure1",
            "--panel", "a",
            "--count", "2",
            "--seed", "7",
            "--jobs", "1",
            "--out", str(tmp_path),
        ],
    )
    assert result.exit_code == 0, result.output
    assert (tmp_path / "figure1a.csv").exists()
    summary = json.loads((tmp_path / "figure1a_summary.json").read_text())
    assert summary["count"] == 2

    result_b = runner.invoke(
        main,
        ["figure1", "--panel", "b", "--mu-grid", "1:1:1", "--out", str(tmp_path)],
    )
    assert result_b.exit_code == 0, result_b.output
    rows = (tmp_path / "figure1b.csv").read_text().strip().splitlines()
    assert len(rows) >= 2  # header + mu = 1 (+ any crossover refinements)
