"""Short/long queue classification and the hybrid Network LP.

Short queues get exact multivariate occupancy variables over capped state
vectors and disjoint partial assignments; long queues get static per-pair
match probabilities.  Contention rows couple the two blocks so no customer
type is promised more than once in expectation.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import lpsolve
from .errors import InfeasibleTarget, SizeBudgetExceeded, SolverFailure
from .instance import Accuracy, Instance, Target

logger = logging.getLogger(__name__)

DEFAULT_VARIABLE_BUDGET = 400_000
_BALANCE_TOL = 1e-7


@dataclass(frozen=True)
class Classification:
    """Partition of supplier types by arrival rate at a given kappa.

    short: rate <= low_cutoff; long: rate >= high_cutoff; removed: strictly
    between (dropped from the LP, still arriving in simulation).
    """

    kappa: int
    delta: float
    low_cutoff: float
    high_cutoff: float
    short: tuple[int, ...]
    long: tuple[int, ...]
    removed: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "delta": self.delta,
            "low_cutoff": self.low_cutoff,
            "high_cutoff": self.high_cutoff,
            "short": list(self.short),
            "long": list(self.long),
            "removed": list(self.removed),
        }


def classify(inst: Instance, acc: Accuracy, kappa: int) -> Classification:
    if kappa not in acc.kappa_range(inst.n):
        raise ValueError(f"kappa {kappa} outside valid range {list(acc.kappa_range(inst.n))}")
    low, high = acc.rate_cutoffs(inst.n, kappa)
    short, long_, removed = [], [], []
    for i, lam in enumerate(inst.supplier_rates):
        if lam <= low:
            short.append(i)
        elif lam >= high:
            long_.append(i)
        else:
            removed.append(i)
    return Classification(
        kappa=kappa,
        delta=acc.delta(inst.n),
        low_cutoff=low,
        high_cutoff=high,
        short=tuple(short),
        long=tuple(long_),
        removed=tuple(removed),
    )


def lemma4_cap(inst: Instance, acc: Accuracy, kappa: int) -> int:
    """Short-queue length cap: ceil((1/eps) * delta^-kappa) + max(0, u) + 1."""
    eps = acc.epsilon
    delta = acc.delta(inst.n)
    u = math.ceil(
        math.log(inst.n**2 / ((1.0 - eps) * eps**2 * delta**kappa)) / math.log(1.0 / eps)
    )
    return int(math.ceil((1.0 / eps) * delta**-kappa) + max(0, u) + 1)


def enumerate_assignments(n_short: int, m: int) -> tuple[tuple[int, ...], ...]:
    """All disjoint partial assignments, encoded per customer type as
    0 (unassigned) or 1..n_short (slot of the covering short queue)."""
    return tuple(itertools.product(range(n_short + 1), repeat=m))


@dataclass(frozen=True)
class NlpSolution:
    cap: int
    epsilon: float
    classification: Classification
    assignments: tuple[tuple[int, ...], ...]
    occupancy: dict[tuple[tuple[int, ...], int], float]
    y: np.ndarray
    objective: float
    throughput: float
    tau_target: float
    contentious: tuple[int, ...]
    retried_at_reduced_target: bool = False

    def short_marginals(self) -> dict[tuple[int, ...], float]:
        marg: dict[tuple[int, ...], float] = {}
        for (state, _a), mass in self.occupancy.items():
            marg[state] = marg.get(state, 0.0) + mass
        return marg

    def short_cover_mass(self, i: int, j: int) -> float:
        """Probability that an arriving type-j customer is covered by short
        queue i while that queue is nonempty (match rate = gamma_j times this)."""
        if i not in self.classification.short:
            return 0.0
        slot = self.classification.short.index(i) + 1
        total = 0.0
        for (state, a_idx), mass in self.occupancy.items():
            a = self.assignments[a_idx]
            if a[j] == slot and state[slot - 1] >= 1:
                total += mass
        return total

    def to_dict(self) -> dict:
        entries = [
            {"state": list(state), "assignment": int(a_idx), "mass": mass}
            for (state, a_idx), mass in sorted(self.occupancy.items())
        ]
        return {
            "cap": self.cap,
            "epsilon": self.epsilon,
            "classification": self.classification.to_dict(),
            "assignments": [list(a) for a in self.assignments],
            "occupancy": entries,
            "y": self.y.tolist(),
            "objective": self.objective,
            "throughput": self.throughput,
            "tau_target": self.tau_target,
            "contentious": list(self.contentious),
            "retried_at_reduced_target": self.retried_at_reduced_target,
        }


def contentious_set(
    occupancy: dict[tuple[tuple[int, ...], int], float],
    assignments: tuple[tuple[int, ...], ...],
    m: int,
    acc: Accuracy,
) -> set[int]:
    """Customer types whose total short-side coverage mass reaches epsilon
    (boundary inclusive)."""
    cover = np.zeros(m)
    for (_state, a_idx), mass in occupancy.items():
        a = assignments[a_idx]
        for j in range(m):
            if a[j] > 0:
                cover[j] += mass
    return {j for j in range(m) if cover[j] >= acc.epsilon - 1e-12}


def build_nlp(
    inst: Instance,
    target: Target,
    acc: Accuracy,
    classification: Classification,
    cap: int,
    budget: int = DEFAULT_VARIABLE_BUDGET,
) -> lpsolve.LinearProgram:
    """Assemble the hybrid LP: global balance over short-state vectors and
    partial assignments, long-queue capacity, per-customer contention, and
    the attenuated throughput floor (1 - eps) * tau*."""
    shorts = classification.short
    longs = classification.long
    n_s = len(shorts)
    m = inst.m
    mu = inst.abandonment_rate
    gam = inst.customer_rates
    assignments = enumerate_assignments(n_s, m)
    num_states = (cap + 1) ** n_s
    num_x = num_states * len(assignments)
    if num_x > budget:
        raise SizeBudgetExceeded(
            f"Network LP needs {num_x} occupancy variables (> budget {budget})",
            dimensions={
                "states": num_states,
                "assignments": len(assignments),
                "cap": cap,
                "n_short": n_s,
                "m": m,
            },
        )

    states = list(itertools.product(range(cap + 1), repeat=n_s))
    state_pos = {s: k for k, s in enumerate(states)}
    lp = lpsolve.LinearProgram()

    # x variables, laid out state-major so var id = state_pos * A + a_idx.
    a_count = len(assignments)
    for state in states:
        for a_idx in range(a_count):
            lp.add_var(obj=0.0, name=f"x[{state}][{a_idx}]")

    def xvar(state: tuple[int, ...], a_idx: int) -> int:
        return state_pos[state] * a_count + a_idx

    yvar: dict[tuple[int, int], int] = {}
    for i in longs:
        for j in range(m):
            yvar[(i, j)] = lp.add_var(obj=float(gam[j] * inst.costs[i, j]), name=f"y[{i}][{j}]")

    # Per-assignment committed rate/cost toward each short slot.
    slot_rate = np.zeros((a_count, n_s))
    slot_cost = np.zeros((a_count, n_s))
    for a_idx, a in enumerate(assignments):
        for j in range(m):
            if a[j] > 0:
                s = a[j] - 1
                slot_rate[a_idx, s] += gam[j]
                slot_cost[a_idx, s] += gam[j] * inst.costs[shorts[s], j]

    # Objective on x: committed cost of nonempty slots.
    for state in states:
        mask = [1.0 if state[s] >= 1 else 0.0 for s in range(n_s)]
        for a_idx in range(a_count):
            val = sum(slot_cost[a_idx, s] * mask[s] for s in range(n_s))
            if val:
                lp.obj[xvar(state, a_idx)] = val

    # Global balance rows.
    lam_short = [float(inst.supplier_rates[i]) for i in shorts]
    for state in states:
        coeffs: dict[int, float] = {}
        out_static = mu * sum(state) + sum(
            lam_short[s] for s in range(n_s) if state[s] < cap
        )
        for a_idx in range(a_count):
            committed = sum(slot_rate[a_idx, s] for s in range(n_s) if state[s] >= 1)
            coeffs[xvar(state, a_idx)] = -(out_static + committed)
        for s in range(n_s):
            if state[s] >= 1:
                below = state[:s] + (state[s] - 1,) + state[s + 1 :]
                for a_idx in range(a_count):
                    v = xvar(below, a_idx)
                    coeffs[v] = coeffs.get(v, 0.0) + lam_short[s]
            if state[s] < cap:
                above = state[:s] + (state[s] + 1,) + state[s + 1 :]
                for a_idx in range(a_count):
                    v = xvar(above, a_idx)
                    coeffs[v] = coeffs.get(v, 0.0) + slot_rate[a_idx, s] + (state[s] + 1) * mu
        lp.add_constraint(coeffs, "=", 0.0, name=f"balance{state}")

    lp.add_constraint(
        {xvar(state, a_idx): 1.0 for state in states for a_idx in range(a_count)},
        "=",
        1.0,
        name="norm",
    )

    for i in longs:
        lp.add_constraint(
            {yvar[(i, j)]: float(gam[j]) for j in range(m)},
            "<=",
            float(inst.supplier_rates[i]),
            name=f"capacity[{i}]",
        )

    # Contention: short coverage mass (at states where the covering queue is
    # nonempty) plus long probabilities, per customer type.
    cover_cols: list[dict[int, float]] = [dict() for _ in range(m)]
    thr: dict[int, float] = {}
    for state in states:
        for a_idx, a in enumerate(assignments):
            var = xvar(state, a_idx)
            rate = 0.0
            for j in range(m):
                s = a[j] - 1
                if a[j] > 0 and state[s] >= 1:
                    cover_cols[j][var] = cover_cols[j].get(var, 0.0) + 1.0
                    rate += gam[j]
            if rate:
                thr[var] = rate
    for j in range(m):
        cols = dict(cover_cols[j])
        for i in longs:
            cols[yvar[(i, j)]] = 1.0
        lp.add_constraint(cols, "<=", 1.0, name=f"contention[{j}]")

    for i in longs:
        for j in range(m):
            thr[yvar[(i, j)]] = thr.get(yvar[(i, j)], 0.0) + float(gam[j])
    tau_floor = (1.0 - acc.epsilon) * target.throughput_floor
    lp.add_constraint(thr, ">=", tau_floor, name="throughput")

    lp.meta = {
        "kind": "nlp",
        "states": states,
        "assignments": assignments,
        "a_count": a_count,
        "xvar_base": 0,
        "yvar": yvar,
        "classification": classification,
        "cap": cap,
        "tau_floor": tau_floor,
    }
    return lp


def solve_nlp(
    inst: Instance,
    target: Target,
    acc: Accuracy,
    classification: Classification | None = None,
    cap: int | None = None,
    budget: int = DEFAULT_VARIABLE_BUDGET,
) -> NlpSolution:
    """Solve the Network LP and return a non-degenerate solution.

    Without an explicit classification, kappa is chosen by enumeration
    (smallest kappa among feasible minimum-objective classifications).
    """
    if classification is None:
        _kappa, solution = choose_kappa(inst, target, acc, budget=budget)
        return solution
    cap = cap if cap is not None else lemma4_cap(inst, acc, classification.kappa)
    lp = build_nlp(inst, target, acc, classification, cap, budget=budget)
    sol = lpsolve.solve(lp)
    if sol.status == "infeasible":
        raise InfeasibleTarget(
            f"Network LP infeasible at throughput floor {lp.meta['tau_floor']}",
            certificate={"kappa": classification.kappa, "cap": cap},
        )
    if not sol.optimal:
        raise SolverFailure(f"Network LP solve failed: {sol.message}")
    return _package_solution(inst, target, acc, classification, cap, lp, sol)


def _package_solution(inst, target, acc, classification, cap, lp, sol) -> NlpSolution:
    meta = lp.meta
    assignments = meta["assignments"]
    a_count = meta["a_count"]
    states = meta["states"]
    shorts = classification.short
    gam = inst.customer_rates

    occupancy: dict[tuple[tuple[int, ...], int], float] = {}
    for k, state in enumerate(states):
        base = k * a_count
        for a_idx in range(a_count):
            mass = sol.x[base + a_idx]
            if mass > 0.0:
                occupancy[(state, a_idx)] = float(mass)

    # Non-degeneracy: strip committed sets of empty queues, moving mass onto
    # the pruned assignment (identical coefficients in every row).
    lookup = {a: idx for idx, a in enumerate(assignments)}
    moved: dict[tuple[tuple[int, ...], int], float] = {}
    for (state, a_idx), mass in occupancy.items():
        a = assignments[a_idx]
        pruned = tuple(0 if (v > 0 and state[v - 1] == 0) else v for v in a)
        key = (state, lookup[pruned])
        moved[key] = moved.get(key, 0.0) + mass
    occupancy = {k: v for k, v in moved.items() if v > 1e-300}

    y = np.zeros((inst.n, inst.m))
    for (i, j), var in meta["yvar"].items():
        y[i, j] = max(float(sol.x[var]), 0.0)

    short_rate = 0.0
    for (state, a_idx), mass in occupancy.items():
        a = assignments[a_idx]
        for j in range(inst.m):
            if a[j] > 0 and state[a[j] - 1] >= 1:
                short_rate += gam[j] * mass
    throughput = short_rate + float((gam[None, :] * y).sum())

    cont = contentious_set(occupancy, assignments, inst.m, acc)
    solution = NlpSolution(
        cap=cap,
        epsilon=acc.epsilon,
        classification=classification,
        assignments=assignments,
        occupancy=occupancy,
        y=y,
        objective=float(sol.objective),
        throughput=throughput,
        tau_target=target.throughput_floor,
        contentious=tuple(sorted(cont)),
    )
    check_balance_residuals(inst, solution)
    return solution


def check_balance_residuals(inst: Instance, nlp: NlpSolution, tol: float = _BALANCE_TOL) -> float:
    """Verify every global balance row on the packaged solution; returns the
    worst residual.  A hard postcondition, not best-effort."""
    shorts = nlp.classification.short
    n_s = len(shorts)
    cap = nlp.cap
    mu = inst.abandonment_rate
    gam = inst.customer_rates
    lam_short = [float(inst.supplier_rates[i]) for i in shorts]
    marg = nlp.short_marginals()
    assignments = nlp.assignments

    slot_rate = np.zeros((len(assignments), n_s))
    for a_idx, a in enumerate(assignments):
        for j in range(inst.m):
            if a[j] > 0:
                slot_rate[a_idx, a[j] - 1] += gam[j]

    # Aggregate per-state inflow/outflow using committed-rate sums.
    committed: dict[tuple[int, ...], np.ndarray] = {}
    for (state, a_idx), mass in nlp.occupancy.items():
        acc_vec = committed.get(state)
        if acc_vec is None:
            acc_vec = np.zeros(n_s)
            committed[state] = acc_vec
        acc_vec += mass * slot_rate[a_idx]

    worst = 0.0
    for state in itertools.product(range(cap + 1), repeat=n_s):
        total = marg.get(state, 0.0)
        com = committed.get(state, np.zeros(n_s))
        out = total * (mu * sum(state) + sum(lam_short[s] for s in range(n_s) if state[s] < cap))
        out += sum(com[s] for s in range(n_s) if state[s] >= 1)
        inflow = 0.0
        for s in range(n_s):
            if state[s] >= 1:
                below = state[:s] + (state[s] - 1,) + state[s + 1 :]
                inflow += lam_short[s] * marg.get(below, 0.0)
            if state[s] < cap:
                above = state[:s] + (state[s] + 1,) + state[s + 1 :]
                inflow += committed.get(above, np.zeros(n_s))[s] + (state[s] + 1) * mu * marg.get(
                    above, 0.0
                )
        worst = max(worst, abs(inflow - out))
    if worst > tol:
        raise SolverFailure(f"global balance residual {worst:.3e} exceeds {tol}")
    return worst


def choose_kappa(
    inst: Instance,
    target: Target,
    acc: Accuracy,
    budget: int = DEFAULT_VARIABLE_BUDGET,
) -> tuple[int, NlpSolution]:
    """Enumerate kappa, solve each classification's LP, keep the feasible one
    with minimum objective (ties to the smallest kappa).

    If removal of mid-band supplier types makes the target unattainable at
    every kappa, retry once at (1 - eps) * tau* with a warning.
    """
    attempts: list[tuple[float, int, NlpSolution]] = []
    skipped: list[tuple[int, str]] = []
    seen_partitions: set[tuple] = set()
    for kappa in acc.kappa_range(inst.n):
        cls = classify(inst, acc, kappa)
        partition = (cls.short, cls.long, cls.removed)
        if partition in seen_partitions:
            # Same partition at a larger kappa differs only through a much
            # larger cap; the smaller-kappa solve already covers it.
            skipped.append((kappa, "duplicate partition"))
            continue
        seen_partitions.add(partition)
        try:
            solution = solve_nlp(inst, target, acc, classification=cls, budget=budget)
        except SizeBudgetExceeded as exc:
            skipped.append((kappa, f"budget: {exc}"))
            continue
        except InfeasibleTarget:
            skipped.append((kappa, "infeasible"))
            continue
        attempts.append((solution.objective, kappa, solution))
    if attempts:
        attempts.sort(key=lambda t: (t[0], t[1]))
        _obj, kappa, solution = attempts[0]
        return kappa, solution
    removal_happened = any(
        classify(inst, acc, kappa).removed for kappa in acc.kappa_range(inst.n)
    )
    if not removal_happened:
        # No mid-band types were dropped anywhere, so infeasibility is genuine.
        raise InfeasibleTarget(
            f"Network LP infeasible at every kappa (tried {list(acc.kappa_range(inst.n))})",
            certificate={"skipped": skipped},
        )
    reduced = Target(target.cost_cap, (1.0 - acc.epsilon) * target.throughput_floor)
    logger.warning(
        "target unattainable after mid-band removal at every kappa; retrying at "
        "(1 - eps) * tau* = %s",
        reduced.throughput_floor,
    )
    seen_partitions.clear()
    for kappa in acc.kappa_range(inst.n):
        cls = classify(inst, acc, kappa)
        partition = (cls.short, cls.long, cls.removed)
        if partition in seen_partitions:
            continue
        seen_partitions.add(partition)
        try:
            solution = solve_nlp(inst, reduced, acc, classification=cls, budget=budget)
        except (SizeBudgetExceeded, InfeasibleTarget):
            continue
        solution = _mark_retried(solution)
        return kappa, solution
    raise InfeasibleTarget(
        f"Network LP infeasible at every kappa (tried {list(acc.kappa_range(inst.n))}); "
        f"skipped: {skipped}",
        certificate={"skipped": skipped},
    )


def _mark_retried(solution: NlpSolution) -> NlpSolution:
    from dataclasses import replace

    return replace(solution, retried_at_reduced_target=True)
