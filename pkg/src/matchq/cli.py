"""Command-line front end: solve, simulate, and reproduction studies.

Exit codes: 0 success, 2 infeasible target, 3 input error, 4 numerical
failure.  Every command is deterministic under a fixed --seed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import dlp, euclid, network, oracle, sim
from .errors import InfeasibleTarget, InvalidInstance, MatchqError, SizeBudgetExceeded, SolverFailure
from .instance import Accuracy, Instance, Target, load_path
from .policies import DlpAdaptivePolicy, PriorityRoundingPolicy, policy_from_dict

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_INPUT = 3
EXIT_NUMERICAL = 4

logger = logging.getLogger("matchq")


def _setup_logging() -> None:
    level = os.environ.get("MATCHQ_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load(instance_path: str) -> Instance:
    try:
        return load_path(instance_path)
    except FileNotFoundError:
        _fail(EXIT_INPUT, f"instance file not found: {instance_path}")
    except InvalidInstance as exc:
        _fail(EXIT_INPUT, str(exc))


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


@click.group()
def main() -> None:
    """Adaptive matching policies for queueing systems with abandonment."""
    _setup_logging()


@main.command("solve")
@click.option("--instance", "instance_path", required=True, help="instance document (JSON)")
@click.option("--tau", type=float, required=True, help="throughput floor tau*")
@click.option("--cost-cap", type=float, default=math.inf, show_default=True, help="cost cap c*")
@click.option("--eps", type=float, default=0.1, show_default=True, help="accuracy epsilon")
@click.option("--cap-override", type=int, default=None, help="explicit queue-length cap")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--jobs", type=int, default=None, help="parallel workers (default: cores)")
@click.option("--out", "out_dir", default=".", show_default=True)
def cmd_solve(instance_path, tau, cost_cap, eps, cap_override, seed, jobs, out_dir):
    """Solve for a policy: Dynamic LP (single queue), Network LP + Priority
    Rounding (constant n), or the Euclidean pipeline (located instances)."""
    inst = _load(instance_path)
    out = Path(out_dir)
    try:
        target = Target(cost_cap=cost_cap, throughput_floor=tau)
        target.validate_for(inst)
        acc = Accuracy(eps)
        config = {
            "instance": str(instance_path),
            "tau": tau,
            "cost_cap": cost_cap,
            "eps": eps,
            "cap_override": cap_override,
            "seed": seed,
        }
        if isinstance(inst, euclid.EuclideanInstance):
            rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
            decomp, dsol, policy = euclid.solve_euclidean(inst, target, acc, rng)
            report = {
                "pipeline": "euclidean",
                "config": config,
                "grid": decomp.to_dict(),
                "decomposition": dsol.to_dict(),
            }
            policy_doc = policy.to_dict()
        elif inst.single_queue():
            solution, duals = dlp.solve_dlp(inst, target, acc, cap=cap_override)
            table = dlp.extract_policy(solution)
            policy_doc = DlpAdaptivePolicy(table).to_dict()
            report = {
                "pipeline": "dynamic_lp",
                "config": {**config, "cap": solution.cap},
                "solution": solution.to_dict(),
                "duals": duals.to_dict(),
            }
        else:
            kappa, nlp = network.choose_kappa(inst, target, acc)
            policy_doc = PriorityRoundingPolicy.from_nlp(nlp).to_dict()
            report = {
                "pipeline": "network_lp",
                "config": {**config, "kappa": kappa, "cap": nlp.cap},
                "solution": nlp.to_dict(),
            }
        _write_json(out / "policy.json", policy_doc)
        _write_json(out / "report.json", report)
        click.echo(f"wrote {out / 'policy.json'} and {out / 'report.json'}")
    except InfeasibleTarget as exc:
        _fail(EXIT_INFEASIBLE, f"target infeasible: {exc}")
    except (InvalidInstance, SizeBudgetExceeded) as exc:
        _fail(EXIT_INPUT, str(exc))
    except (SolverFailure, MatchqError) as exc:
        _fail(EXIT_NUMERICAL, str(exc))


@main.command("simulate")
@click.option("--instance", "instance_path", required=True)
@click.option("--policy", "policy_path", required=True)
@click.option("--horizon", type=float, default=1e5, show_default=True)
@click.option("--warmup", type=float, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--replications", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", default=".", show_default=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
def cmd_simulate(instance_path, policy_path, horizon, warmup, seed, replications, out_dir, fmt):
    """Replay a saved policy and export metrics."""
    inst = _load(instance_path)
    out = Path(out_dir)
    try:
        doc = json.loads(Path(policy_path).read_text())
    except FileNotFoundError:
        _fail(EXIT_INPUT, f"policy file not found: {policy_path}")
    except json.JSONDecodeError as exc:
        _fail(EXIT_INPUT, f"policy file is not valid JSON: {exc}")
    try:
        policy = policy_from_dict(doc)
        cfg = sim.SimConfig(horizon=horizon, warmup=warmup, seed=seed, replications=replications)
        metrics = sim.simulate(inst, policy, cfg)
        if fmt == "json":
            _write_json(out / "metrics.json", metrics.to_dict())
            click.echo(f"wrote {out / 'metrics.json'}")
        else:
            path = out / "metrics.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            rows = metrics.replicates or [metrics]
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(
                    ["replication", "throughput", "throughput_se", "cost", "cost_se", "events"]
                )
                for r, met in enumerate(rows):
                    writer.writerow(
                        [
                            r,
                            repr(met.throughput_rate),
                            repr(met.throughput_stderr),
                            repr(met.cost_rate),
                            repr(met.cost_stderr),
                            met.event_count,
                        ]
                    )
            click.echo(f"wrote {path}")
    except (InvalidInstance,) as exc:
        _fail(EXIT_INPUT, str(exc))
    except InfeasibleTarget as exc:
        _fail(EXIT_INFEASIBLE, str(exc))
    except MatchqError as exc:
        _fail(EXIT_NUMERICAL, str(exc))


@main.command("figure1")
@click.option("--panel", type=click.Choice(["a", "b", "both"]), default="both", show_default=True)
@click.option("--count", type=int, default=1000, show_default=True, help="panel (a) instances")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--jobs", type=int, default=None)
@click.option("--mu-grid", default="0:3:0.05", show_default=True, help="panel (b) grid lo:hi:step")
@click.option("--out", "out_dir", default=".", show_default=True)
def cmd_figure1(panel, count, seed, jobs, mu_grid, out_dir):
    """Reproduce the static-versus-adaptive comparison studies."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = jobs if jobs is not None else (os.cpu_count() or 1)
    try:
        if panel in ("a", "both"):
            summary = oracle.random_instance_study(count, seed=seed, jobs=jobs)
            path = out / "figure1a.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["instance_id", "tau_star", "static", "adaptive", "gap"])
                for row in summary.rows:
                    writer.writerow(
                        [row.instance_id, row.tau_star, repr(row.static_cost), repr(row.adaptive_cost), repr(row.gap)]
                    )
            _write_json(
                out / "figure1a_summary.json",
                {
                    "count": count,
                    "seed": seed,
                    "mean_excess": summary.mean_excess,
                    "share_above_5pct": summary.share_above_5pct,
                    "quartiles": list(summary.quartiles),
                    "max_gap": summary.max_gap,
                    "infeasible_pairs": summary.infeasible_pairs,
                    "infinite_gaps": summary.infinite_gaps,
                },
            )
            click.echo(f"panel (a): mean excess {summary.mean_excess:.4f}, wrote {path}")
        if panel in ("b", "both"):
            lo, hi, step = (float(v) for v in mu_grid.split(":"))
            grid = np.round(np.arange(lo, hi + step / 2, step), 10)
            hard = Instance([4.0], [2.4, 2.4, 7.2], [[0.0, 0.0, 1.0]])
            points = oracle.adaptivity_gap(
                hard, Target(math.inf, 3.0), grid, refine_crossover=True
            )
            path = out / "figure1b.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["mu", "static", "adaptive", "gap", "feasible"])
                for p in points:
                    writer.writerow(
                        [repr(p.mu), repr(p.static_cost), repr(p.adaptive_cost), repr(p.gap), int(p.feasible)]
                    )
            finite = [p.gap for p in points if p.feasible and p.gap is not None and math.isfinite(p.gap)]
            click.echo(f"panel (b): max gap {max(finite):.4f}, wrote {path}")
    except MatchqError as exc:
        _fail(EXIT_NUMERICAL, str(exc))


if __name__ == "__main__":
    main()
