"""Single-queue Dynamic LP over state-action occupancies, plus the multi-queue
relaxation used for diagnostics.

The LP variables x[l][u] are stationary probabilities of (queue length l,
committed nested matching set u).  Flow balance across adjacent lengths, a
normalization row, and a throughput floor pin the feasible set to the
stationary distributions of length-capped adaptive policies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from . import lpsolve
from .errors import InfeasibleTarget, SizeBudgetExceeded, SolverFailure
from .instance import Accuracy, Instance, Target

# Implementation constant inside the length-cap rule; validated by the
# doubling-stability test rather than taken from any closed form.
CAP_RULE_CONSTANT = 8.0

_DUAL_TOL = 1e-7
_MULTI_DLP_BUDGET = 2_000_000


@dataclass(frozen=True)
class NestedFamily:
    """Cost-ordered nested matching sets M^0 = {} through M^U = all types.

    Types with equal cost enter at the same boundary, so consecutive sets
    differ by whole tie groups.
    """

    order: tuple[int, ...]
    sets: tuple[tuple[int, ...], ...]
    set_rates: tuple[float, ...]
    set_cost_rates: tuple[float, ...]

    @property
    def size(self) -> int:
        return len(self.sets)

    def members(self, u: int) -> tuple[int, ...]:
        return self.sets[u]

    @staticmethod
    def for_instance(inst: Instance, supplier: int = 0) -> "NestedFamily":
        costs = inst.costs[supplier]
        order = tuple(int(j) for j in np.lexsort((np.arange(inst.m), costs)))
        sets: list[tuple[int, ...]] = [()]
        rates = [0.0]
        cost_rates = [0.0]
        prefix: list[int] = []
        k = 0
        while k < inst.m:
            level = costs[order[k]]
            while k < inst.m and costs[order[k]] == level:
                prefix.append(order[k])
                k += 1
            members = tuple(sorted(prefix))
            sets.append(members)
            rates.append(float(inst.customer_rates[list(members)].sum()))
            cost_rates.append(
                float((inst.customer_rates[list(members)] * costs[list(members)]).sum())
            )
        return NestedFamily(order, tuple(sets), tuple(rates), tuple(cost_rates))


@dataclass(frozen=True)
class DlpSolution:
    cap: int
    family: NestedFamily
    x: np.ndarray  # (cap+1, U)
    objective: float
    throughput: float
    tau_target: float

    def marginals(self) -> np.ndarray:
        return self.x.sum(axis=1)

    def to_dict(self) -> dict:
        return {
            "cap": self.cap,
            "nested_sets": [list(s) for s in self.family.sets],
            "occupancy": self.x.tolist(),
            "objective": self.objective,
            "throughput": self.throughput,
            "tau_target": self.tau_target,
        }


@dataclass(frozen=True)
class DualDiagnostics:
    """Paper-signed duals of the relaxed Dynamic LP.

    delta[l-1] prices the flow-balance row at length l; it is nonpositive,
    nondecreasing, and concave at any optimum.  The active sets describe which
    nested sets complementary slackness allows at each length.
    """

    alpha: float
    theta: float
    delta: np.ndarray  # index l-1 for l = 1..cap
    must_include: tuple[tuple[int, ...], ...]  # M-hat per length 1..cap
    boundary: tuple[tuple[int, ...], ...]  # M-tilde per length 1..cap

    def dual_objective(self, tau_target: float) -> float:
        return self.alpha + self.theta * tau_target

    def check_shape(self, tol: float = _DUAL_TOL) -> None:
        d = self.delta
        if d.size and d.max() > tol:
            raise SolverFailure(f"dual delta must be nonpositive, max {d.max():.3e}")
        if d.size >= 2:
            steps = np.diff(d)
            if steps.min() < -tol:
                raise SolverFailure(f"dual delta must be nondecreasing, min step {steps.min():.3e}")
            if steps.size >= 2 and np.diff(steps).max() > tol:
                raise SolverFailure(
                    f"dual delta increments must be nonincreasing, max jump {np.diff(steps).max():.3e}"
                )

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "theta": self.theta,
            "delta": self.delta.tolist(),
            "must_include": [list(s) for s in self.must_include],
            "boundary": [list(s) for s in self.boundary],
        }


@dataclass(frozen=True)
class AdaptivePolicyTable:
    """Per-length commitment distribution over nested sets, plus per-type
    conditional match probabilities."""

    cap: int
    family: NestedFamily
    rows: np.ndarray  # (cap+1, U), each row sums to 1
    match_prob: np.ndarray  # (cap+1, m)
    zero_mass_states: tuple[int, ...] = ()

    def committed_rate(self, level: int) -> float:
        return float(np.dot(self.rows[level], self.family.set_rates))

    def to_dict(self) -> dict:
        return {
            "cap": self.cap,
            "nested_sets": [list(s) for s in self.family.sets],
            "rows": self.rows.tolist(),
            "zero_mass_states": list(self.zero_mass_states),
        }

    @staticmethod
    def from_dict(doc: dict) -> "AdaptivePolicyTable":
        sets = [tuple(s) for s in doc["nested_sets"]]
        rows = np.asarray(doc["rows"], dtype=float)
        m = max((max(s) for s in sets if s), default=-1) + 1
        match = np.zeros((rows.shape[0], m))
        for u, members in enumerate(sets):
            for j in members:
                match[:, j] += rows[:, u]
        family = NestedFamily(
            order=tuple(range(m)),
            sets=tuple(sets),
            set_rates=tuple(0.0 for _ in sets),
            set_cost_rates=tuple(0.0 for _ in sets),
        )
        return AdaptivePolicyTable(
            cap=int(doc["cap"]),
            family=family,
            rows=rows,
            match_prob=match,
            zero_mass_states=tuple(doc.get("zero_mass_states", ())),
        )


def truncation_cap(inst: Instance, target: Target, acc: Accuracy) -> int:
    """Queue-length cap sufficient for a (1-eps)-accurate Dynamic LP.

    cap = ceil(C * (1/eps) * (log(tau_max/tau*) + log(1/eps))), floored at
    ceil(lambda_max/mu) + 1 so the naive bound is covered on small inputs.
    """
    eps = acc.epsilon
    tau_star = target.throughput_floor
    lam_scale = float(inst.supplier_rates.max()) / max(inst.abandonment_rate, 1e-300)
    floor_cap = int(math.ceil(lam_scale)) + 1
    if tau_star <= 0:
        return max(int(math.ceil(CAP_RULE_CONSTANT / eps * math.log(1.0 / eps))), floor_cap, 1)
    ratio = max(inst.tau_max / tau_star, 1.0)
    base = math.ceil(CAP_RULE_CONSTANT * (1.0 / eps) * (math.log(ratio) + math.log(1.0 / eps)))
    return max(int(base), floor_cap, 1)


def build_dlp(
    inst: Instance,
    tau_target: float,
    cap: int,
    *,
    relaxed_flow: bool = False,
) -> lpsolve.LinearProgram:
    """Assemble the Dynamic LP over the nested family at the given cap.

    With ``relaxed_flow`` the flow-balance rows become inequalities (outflow
    <= inflow), which leaves the optimum unchanged but constrains the duals to
    the shape used by the diagnostics.
    """
    if inst.n != 1:
        raise ValueError("build_dlp requires a single-queue instance")
    if cap < 1:
        raise ValueError("cap must be at least 1")
    family = NestedFamily.for_instance(inst)
    mu = inst.abandonment_rate
    lam = float(inst.supplier_rates[0])
    u_count = family.size

    lp = lpsolve.LinearProgram()
    index: dict[tuple[int, int], int] = {}
    for level in range(cap + 1):
        for u in range(u_count):
            if level == 0 and u != 0:
                continue  # empty queue can only commit to the empty set
            index[(level, u)] = lp.add_var(
                obj=family.set_cost_rates[u], name=f"x[{level}][{u}]"
            )

    for level in range(1, cap + 1):
        coeffs: dict[int, float] = {}
        for u in range(u_count):
            prev = index.get((level - 1, u))
            if prev is not None:
                coeffs[prev] = coeffs.get(prev, 0.0) + lam
            coeffs[index[(level, u)]] = -(family.set_rates[u] + level * mu)
        if relaxed_flow:
            lp.add_constraint({k: -v for k, v in coeffs.items()}, "<=", 0.0, name=f"flow[{level}]")
        else:
            lp.add_constraint(coeffs, "=", 0.0, name=f"flow[{level}]")

    lp.add_constraint({v: 1.0 for v in index.values()}, "=", 1.0, name="norm")
    thr = {
        index[(level, u)]: family.set_rates[u]
        for level in range(1, cap + 1)
        for u in range(u_count)
        if family.set_rates[u] > 0.0
    }
    lp.add_constraint(thr, ">=", float(tau_target), name="throughput")
    lp.meta = {
        "kind": "dlp",
        "index": index,
        "cap": cap,
        "family": family,
        "tau_target": float(tau_target),
        "flow_rows": list(range(cap)),
        "norm_row": cap,
        "throughput_row": cap + 1,
    }
    return lp


def solve_dlp(
    inst: Instance,
    target: Target,
    acc: Accuracy,
    *,
    cap: int | None = None,
) -> tuple[DlpSolution, DualDiagnostics]:
    """Solve the Dynamic LP at the throughput floor; raise InfeasibleTarget
    with a certificate when the floor is unattainable at the chosen cap."""
    if inst.n != 1:
        raise ValueError("solve_dlp requires a single-queue instance")
    cap = cap if cap is not None else truncation_cap(inst, target, acc)
    tau_star = target.throughput_floor

    lp = build_dlp(inst, tau_star, cap)
    sol = lpsolve.solve(lp)
    if sol.status == "infeasible":
        raise InfeasibleTarget(
            f"throughput {tau_star} is not attainable by {cap}-bounded policies",
            certificate={"cap": cap, "tau_target": tau_star, "tau_max": inst.tau_max},
        )
    if not sol.optimal:
        raise SolverFailure(f"Dynamic LP solve failed: {sol.message}")
    sol = _monotone_tiebreak(inst, lp, sol, cap)

    relaxed = build_dlp(inst, tau_star, cap, relaxed_flow=True)
    dual_sol = lpsolve.solve(relaxed)
    if not dual_sol.optimal:
        raise SolverFailure(f"relaxed Dynamic LP solve failed: {dual_sol.message}")
    if abs(dual_sol.objective - sol.objective) > 1e-6 * (1.0 + abs(sol.objective)):
        raise SolverFailure(
            "relaxed and equality Dynamic LPs disagree: "
            f"{dual_sol.objective} vs {sol.objective}"
        )

    meta = lp.meta
    family: NestedFamily = meta["family"]
    x = np.zeros((cap + 1, family.size))
    for (level, u), var in meta["index"].items():
        x[level, u] = max(sol.x[var], 0.0)
    achieved = float(
        sum(
            family.set_rates[u] * x[level, u]
            for level in range(1, cap + 1)
            for u in range(family.size)
        )
    )
    solution = DlpSolution(
        cap=cap,
        family=family,
        x=x,
        objective=float(sol.objective),
        throughput=achieved,
        tau_target=tau_star,
    )
    diagnostics = _dual_diagnostics(inst, family, dual_sol, cap, meta)
    return solution, diagnostics


def _monotone_tiebreak(
    inst: Instance, lp: lpsolve.LinearProgram, sol: lpsolve.LpSolution, cap: int
) -> lpsolve.LpSolution:
    """Select the monotone vertex among cost-tied optima.

    Cost ties (equal-cost customer groups, or a single type where every
    feasible point is cost-optimal) let the solver return a vertex whose
    extracted policy is not monotone even though a monotone optimum always
    exists.  A second solve pins the cost at its optimum and pushes service
    mass toward long queue lengths, which recovers the threshold shape.
    """
    meta = lp.meta
    family: NestedFamily = meta["family"]
    if not _has_non_monotone_support(sol, meta, family, cap):
        return sol
    scale = 1e-9 * (1.0 + abs(sol.objective))
    stage2 = build_dlp(inst, meta["tau_target"], cap)
    stage2.add_constraint(
        dict(enumerate(stage2.obj)), "<=", sol.objective + scale, name="cost_pin"
    )
    for (level, u), var in stage2.meta["index"].items():
        stage2.obj[var] = (cap + 1 - level) * family.set_rates[u]
    second = lpsolve.solve(stage2)
    if not second.optimal:
        return sol
    second.objective = float(
        sum(
            family.set_cost_rates[u] * second.x[var]
            for (level, u), var in stage2.meta["index"].items()
        )
    )
    return second


def _has_non_monotone_support(sol, meta, family: NestedFamily, cap: int, tol: float = 1e-7) -> bool:
    index = meta["index"]
    x = np.zeros((cap + 1, family.size))
    for (level, u), var in index.items():
        x[level, u] = sol.x[var]
    marg = x.sum(axis=1)
    prev = None
    m = max((max(s) for s in family.sets if s), default=-1) + 1
    for level in range(cap + 1):
        if marg[level] <= 1e-12:
            continue
        probs = np.zeros(m)
        for u, members in enumerate(family.sets):
            for j in members:
                probs[j] += x[level, u] / marg[level]
        if prev is not None and np.any(probs < prev - tol):
            return True
        prev = probs
    return False


def _dual_diagnostics(
    inst: Instance,
    family: NestedFamily,
    dual_sol: lpsolve.LpSolution,
    cap: int,
    meta: dict,
) -> DualDiagnostics:
    duals = dual_sol.duals
    alpha = float(duals[meta["norm_row"]])
    theta = float(duals[meta["throughput_row"]])
    delta = _canonical_delta(inst, family, alpha, theta, cap)
    costs = inst.costs[0]
    must, boundary = [], []
    for level in range(1, cap + 1):
        d = delta[level - 1]
        reduced = costs - theta
        must.append(tuple(int(j) for j in np.flatnonzero(reduced < d - _DUAL_TOL)))
        boundary.append(tuple(int(j) for j in np.flatnonzero(np.abs(reduced - d) <= _DUAL_TOL)))
    return DualDiagnostics(
        alpha=alpha,
        theta=theta,
        delta=delta,
        must_include=tuple(must),
        boundary=tuple(boundary),
    )


def _canonical_delta(
    inst: Instance, family: NestedFamily, alpha: float, theta: float, cap: int
) -> np.ndarray:
    """Tightest dual prices consistent with (alpha, theta).

    Every optimal dual makes some Bellman constraint tight at each length, so
    delta[l] = min over nested sets of the constraint bound; the recursion
    runs backward from the cap (where the price past the cap is zero), which
    keeps it numerically stable.  Solver duals are unreliable only at lengths
    whose occupancy underflows to zero; this reconstruction is not.
    """
    mu = inst.abandonment_rate
    lam = float(inst.supplier_rates[0])
    # Recurse from well past the cap: the zero boundary price would otherwise
    # bend the last few steps (a truncation artifact with no occupancy mass);
    # its influence decays geometrically over the padding.
    horizon = 2 * cap + 64
    delta = np.zeros(horizon + 2)
    for level in range(horizon, 0, -1):
        best = math.inf
        for u in range(family.size):
            gm = family.set_rates[u]
            reduced = family.set_cost_rates[u] - theta * gm
            denom = level * mu + gm
            if denom <= 0:
                continue
            best = min(best, (lam * delta[level + 1] - alpha + reduced) / denom)
        delta[level] = min(best, 0.0)
    return delta[1 : cap + 1]


def extract_policy(sol: DlpSolution, mass_tol: float = 1e-12) -> AdaptivePolicyTable:
    """Conditional commitment table P(set u | length l) from the occupancies.

    Lengths carrying no stationary mass get the empty commitment; they are
    unobservable in steady state and recorded for inspection.
    """
    marg = sol.marginals()
    rows = np.zeros_like(sol.x)
    zero_states = []
    for level in range(sol.cap + 1):
        if marg[level] > mass_tol:
            rows[level] = sol.x[level] / marg[level]
        else:
            rows[level, 0] = 1.0
            zero_states.append(level)
    m = int(
        max((max(s) for s in sol.family.sets if s), default=-1) + 1
    )
    match = np.zeros((sol.cap + 1, m))
    for u, members in enumerate(sol.family.sets):
        for j in members:
            match[:, j] += rows[:, u]
    return AdaptivePolicyTable(
        cap=sol.cap,
        family=sol.family,
        rows=rows,
        match_prob=match,
        zero_mass_states=tuple(zero_states),
    )


def build_multi_dlp(inst: Instance, tau_target: float, cap: int) -> lpsolve.LinearProgram:
    """Multi-queue occupancy relaxation: per-queue birth-death polytopes,
    shared throughput floor, and per-customer contention rows.

    All 2^m matching sets per queue are enumerated (the per-queue nested
    structure depends on unknown contention prices, so no column pruning is
    sound here).  Diagnostics only: for n > 1 this LP keeps a constant gap
    with the online optimum.
    """
    if cap < 1:
        raise ValueError("cap must be at least 1")
    m = inst.m
    n = inst.n
    mu = inst.abandonment_rate
    subsets = [tuple(c) for size in range(m + 1) for c in combinations(range(m), size)]
    num_vars = n * (cap + 1) * len(subsets)
    if num_vars > _MULTI_DLP_BUDGET:
        raise SizeBudgetExceeded(
            f"multi-queue DLP needs {num_vars} variables (> {_MULTI_DLP_BUDGET})",
            dimensions={"n": n, "cap": cap, "subsets": len(subsets)},
        )
    gam = inst.customer_rates
    set_rate = [float(gam[list(s)].sum()) for s in subsets]
    lp = lpsolve.LinearProgram()
    index: dict[tuple[int, int, int], int] = {}
    for i in range(n):
        cost_rate = [float((gam[list(s)] * inst.costs[i, list(s)]).sum()) for s in subsets]
        for level in range(cap + 1):
            for u, members in enumerate(subsets):
                if level == 0 and members:
                    continue
                index[(i, level, u)] = lp.add_var(obj=cost_rate[u], name=f"x[{i}][{level}][{u}]")
    for i in range(n):
        lam = float(inst.supplier_rates[i])
        for level in range(1, cap + 1):
            coeffs: dict[int, float] = {}
            for u in range(len(subsets)):
                prev = index.get((i, level - 1, u))
                if prev is not None:
                    coeffs[prev] = coeffs.get(prev, 0.0) + lam
                coeffs[index[(i, level, u)]] = -(set_rate[u] + level * mu)
            lp.add_constraint(coeffs, "=", 0.0, name=f"flow[{i}][{level}]")
        lp.add_constraint(
            {v: 1.0 for (qi, _, _), v in index.items() if qi == i}, "=", 1.0, name=f"norm[{i}]"
        )
    for j in range(m):
        cols = {
            index[(i, level, u)]: 1.0
            for (i, level, u) in index
            if level >= 1 and j in subsets[u]
        }
        lp.add_constraint(cols, "<=", 1.0, name=f"contention[{j}]")
    thr = {
        index[(i, level, u)]: set_rate[u]
        for (i, level, u) in index
        if level >= 1 and set_rate[u] > 0
    }
    lp.add_constraint(thr, ">=", float(tau_target), name="throughput")
    lp.meta = {
        "kind": "multi_dlp",
        "index": index,
        "subsets": subsets,
        "cap": cap,
        "tau_target": float(tau_target),
    }
    return lp
