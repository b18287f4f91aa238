"""Executable matching policies.

Four families: single-queue static thresholds, the greedy static-rate
baseline from the submodular static relaxation, single-queue adaptive tables
extracted from the Dynamic LP, and Priority Rounding over a Network LP
solution (with virtual buffers for contentious customer types).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import ctmc, lpsolve
from .dlp import AdaptivePolicyTable
from .errors import InfeasibleTarget, InvalidInstance
from .instance import Instance, Target

_MU_ZERO_CAP = 4000  # chain cap used when there is no abandonment to stabilize


@dataclass
class PolicyDecision:
    match_to: int | None = None
    buffer_increment: tuple[int, int] | None = None
    buffer_decrement: tuple[int, int] | None = None
    surplus_match: bool = False
    anomaly: str | None = None


class VirtualBuffer:
    """Pending delayed-match counters V[i, j]; decrements floor at zero."""

    def __init__(self):
        self.counts: dict[tuple[int, int], int] = {}

    def get(self, i: int, j: int) -> int:
        return self.counts.get((i, j), 0)

    def increment(self, i: int, j: int) -> None:
        self.counts[(i, j)] = self.counts.get((i, j), 0) + 1

    def decrement(self, i: int, j: int) -> None:
        self.counts[(i, j)] = max(0, self.counts.get((i, j), 0) - 1)

    def total(self) -> int:
        return sum(self.counts.values())


# ---------------------------------------------------------------------------
# Static threshold policies (single queue)


@dataclass
class StaticThresholdPolicy:
    """Serve the k-1 cheapest customer types always, the k-th with coin p."""

    k: int
    p: float
    order: tuple[int, ...]  # customer indices sorted by cost ascending
    throughput: float | None = None
    cost: float | None = None

    def serve_probability(self, j: int) -> float:
        rank = self.order.index(j) + 1
        if rank < self.k:
            return 1.0
        if rank == self.k:
            return self.p
        return 0.0

    def serve_probs(self, m: int) -> np.ndarray:
        return np.array([self.serve_probability(j) for j in range(m)])

    def to_dict(self) -> dict:
        return {"type": "static_threshold", "k": self.k, "p": self.p, "order": list(self.order)}


def static_threshold_decide(
    policy: StaticThresholdPolicy, j: int, queue_length: int, rng
) -> PolicyDecision:
    if queue_length <= 0:
        return PolicyDecision(match_to=None)
    prob = policy.serve_probability(j)
    if prob >= 1.0 or (prob > 0.0 and rng.random() < prob):
        return PolicyDecision(match_to=0)
    return PolicyDecision(match_to=None)


def evaluate_static_threshold(
    inst: Instance, k: int, p: float, cap: int | None = None
) -> tuple[float, float]:
    """Exact (throughput, cost) rates of the (k, p) threshold chain."""
    if inst.n != 1:
        raise InvalidInstance("static threshold policies are single-queue")
    order = _cost_order(inst)
    gam = inst.customer_rates
    costs = inst.costs[0]
    served_rate = float(sum(gam[order[r]] for r in range(k - 1))) + p * float(gam[order[k - 1]])
    served_cost = float(sum(gam[order[r]] * costs[order[r]] for r in range(k - 1)))
    served_cost += p * float(gam[order[k - 1]] * costs[order[k - 1]])
    if served_rate == 0.0:
        return 0.0, 0.0
    mu = inst.abandonment_rate
    lam = float(inst.supplier_rates[0])
    if mu == 0.0 and cap is None:
        cap = _MU_ZERO_CAP
    spec = ctmc.BirthDeathSpec(
        birth=lambda _l: lam, death=lambda l: served_rate + l * mu, cap=cap
    )
    dist = ctmc.birth_death_stationary(spec)
    busy = 1.0 - dist.prob(0)
    return served_rate * busy, served_cost * busy


def optimal_static(inst: Instance, target: Target, cap: int | None = None) -> StaticThresholdPolicy:
    """Cheapest (k, p) threshold meeting the throughput floor.

    Throughput is monotone in p, so p is located by bisection to 1e-9 for
    each k; cost is increasing in p, making the bisection result optimal
    within each k.
    """
    if inst.n != 1:
        raise InvalidInstance("optimal_static requires a single-queue instance")
    tau_star = target.throughput_floor
    order = _cost_order(inst)
    best: StaticThresholdPolicy | None = None
    for k in range(1, inst.m + 1):
        tau_hi, cost_hi = evaluate_static_threshold(inst, k, 1.0, cap)
        if tau_hi + 1e-12 < tau_star:
            continue
        tau_lo, cost_lo = evaluate_static_threshold(inst, k, 0.0, cap)
        if tau_lo >= tau_star:
            p, tau_p, cost_p = 0.0, tau_lo, cost_lo
        else:
            lo, hi = 0.0, 1.0
            while hi - lo > 1e-9:
                mid = 0.5 * (lo + hi)
                tau_mid, _ = evaluate_static_threshold(inst, k, mid, cap)
                if tau_mid >= tau_star:
                    hi = mid
                else:
                    lo = mid
            p = hi
            tau_p, cost_p = evaluate_static_threshold(inst, k, p, cap)
        cand = StaticThresholdPolicy(k=k, p=p, order=order, throughput=tau_p, cost=cost_p)
        if best is None or cost_p < best.cost - 1e-15:
            best = cand
    if best is None:
        raise InfeasibleTarget(
            f"no static threshold policy reaches throughput {tau_star}",
            certificate={"tau_target": tau_star, "greedy_max": evaluate_static_threshold(inst, inst.m, 1.0, cap)[0]},
        )
    return best


def _cost_order(inst: Instance) -> tuple[int, ...]:
    costs = inst.costs[0]
    return tuple(int(j) for j in np.lexsort((np.arange(inst.m), costs)))


# ---------------------------------------------------------------------------
# Greedy solution of the static submodular relaxation


def slp_greedy(inst: Instance, tau_target: float) -> np.ndarray:
    """Greedy polymatroid solution of the static LP relaxation.

    Pairs are filled in ascending cost order; pair (i, j) contributes the
    marginal mass gamma_j * (exp(-used_j) - exp(-used_j - lambda_i)), and the
    final coefficient is trimmed so total mass equals tau_target exactly.
    """
    if tau_target < 0:
        raise InvalidInstance("tau_target must be nonnegative")
    lam = inst.supplier_rates
    gam = inst.customer_rates
    max_mass = float((gam * (1.0 - math.exp(-float(lam.sum())))).sum())
    if tau_target > max_mass + 1e-9:
        raise InfeasibleTarget(
            f"static relaxation caps throughput at {max_mass}, target {tau_target}",
            certificate={"slp_max": max_mass},
        )
    z = np.zeros((inst.n, inst.m))
    if tau_target == 0.0:
        return z
    pairs = sorted(
        ((float(inst.costs[i, j]), j, i) for i in range(inst.n) for j in range(inst.m))
    )
    used = np.zeros(inst.m)  # cumulative supplier rate already filling each type
    remaining = tau_target
    for _, j, i in pairs:
        gain = gam[j] * (math.exp(-used[j]) - math.exp(-(used[j] + lam[i])))
        used[j] += lam[i]
        if gain <= 0.0:
            continue
        take = min(gain, remaining)
        z[i, j] = take
        remaining -= take
        if remaining <= 1e-15:
            break
    return z


def slp_lp_value(inst: Instance, tau_target: float) -> float:
    """Direct LP solve of the static relaxation (all subset rows); cross-check
    for the greedy construction."""
    from itertools import combinations

    lp = lpsolve.LinearProgram()
    idx = {}
    for i in range(inst.n):
        for j in range(inst.m):
            idx[(i, j)] = lp.add_var(obj=float(inst.costs[i, j]), name=f"z[{i}][{j}]")
    for j in range(inst.m):
        for size in range(1, inst.n + 1):
            for subset in combinations(range(inst.n), size):
                bound = float(
                    inst.customer_rates[j]
                    * (1.0 - math.exp(-float(inst.supplier_rates[list(subset)].sum())))
                )
                lp.add_constraint({idx[(i, j)]: 1.0 for i in subset}, "<=", bound)
    lp.add_constraint({v: 1.0 for v in idx.values()}, ">=", float(tau_target))
    sol = lpsolve.solve(lp)
    if sol.status == "infeasible":
        raise InfeasibleTarget(f"static relaxation infeasible at {tau_target}")
    return float(sol.objective)


# ---------------------------------------------------------------------------
# Static rate-matrix rounding policy (multi-queue baseline)


@dataclass
class StaticRatePolicy:
    """Round a static rate matrix online: on a type-j arrival draw queue i with
    probability z[i, j] / gamma_j and match if that queue is nonempty."""

    rates: np.ndarray  # (n, m), interpreting z[i, j] as a match *rate*
    customer_rates: np.ndarray

    def __post_init__(self):
        probs = self.rates / self.customer_rates[None, :]
        if probs.sum(axis=0).max() > 1.0 + 1e-9:
            raise InvalidInstance("rate matrix exceeds customer capacity")
        self._cum = np.cumsum(probs, axis=0)

    def draw_queue(self, j: int, u: float) -> int | None:
        col = self._cum[:, j]
        if u >= col[-1]:
            return None
        return int(np.searchsorted(col, u, side="right"))

    def to_dict(self) -> dict:
        return {
            "type": "static_rate",
            "rates": self.rates.tolist(),
            "customer_rates": self.customer_rates.tolist(),
        }


# ---------------------------------------------------------------------------
# Single-queue adaptive policy from a Dynamic LP table


@dataclass
class DlpAdaptivePolicy:
    table: AdaptivePolicyTable

    def __post_init__(self):
        self._cum = np.cumsum(self.table.rows, axis=1)

    @property
    def cap(self) -> int:
        return self.table.cap

    def sample_commitment(self, level: int, u: float) -> int:
        return int(np.searchsorted(self._cum[level], u, side="right"))

    def serves(self, set_index: int, j: int) -> bool:
        return j in self.table.family.sets[set_index]

    def to_dict(self) -> dict:
        doc = self.table.to_dict()
        doc["type"] = "dlp_adaptive"
        return doc


def dlp_adaptive_decide(
    table: AdaptivePolicyTable, level: int, j: int, rng, committed: int | None = None
) -> PolicyDecision:
    """Match an arriving type-j customer iff the committed nested set covers it
    and the queue is nonempty.  Without an explicit commitment one is drawn
    from the table row (same law as redrawing at the last transition)."""
    if committed is None:
        committed = int(np.searchsorted(np.cumsum(table.rows[level]), rng.random(), side="right"))
    if level >= 1 and j in table.family.sets[committed]:
        return PolicyDecision(match_to=0)
    return PolicyDecision(match_to=None)


# ---------------------------------------------------------------------------
# Priority Rounding


@dataclass
class PriorityRoundingPolicy:
    """Online rounding of a Network LP solution.

    Per customer arrival: sample a short-queue assignment from the occupancy
    conditionals, sample a long queue from the damped static rates, give the
    short match priority, schedule deprioritized contentious matches on
    virtual buffers, and fulfil them in the surplus phase.  ``simplified``
    skips surplus matching when the low-priority branch found an empty long
    queue (the variant used by the analysis).
    """

    short: tuple[int, ...]
    long: tuple[int, ...]
    cap: int
    epsilon: float
    contentious: frozenset[int]
    y: np.ndarray  # (n, m); nonzero only on long rows
    assignments: tuple[tuple[int, ...], ...]  # a[j] = position in short tuple + 1, 0 = unassigned
    state_assignment_ids: dict[tuple[int, ...], np.ndarray]
    state_assignment_cum: dict[tuple[int, ...], np.ndarray]
    simplified: bool = False

    def sample_assignment(self, state: tuple[int, ...], u: float) -> tuple[int, ...] | None:
        ids = self.state_assignment_ids.get(state)
        if ids is None or ids.size == 0:
            return None
        cum = self.state_assignment_cum[state]
        pos = int(np.searchsorted(cum, u * cum[-1], side="right"))
        pos = min(pos, ids.size - 1)
        return self.assignments[int(ids[pos])]

    def long_draw(self, j: int, u: float) -> int | None:
        acc = 0.0
        for i in self.long:
            acc += (1.0 - self.epsilon) * self.y[i, j]
            if u < acc:
                return i
        return None

    def surplus_draw(self, j: int, u: float) -> int | None:
        weights = [self.y[i, j] for i in self.long]
        total = sum(weights)
        if total <= 0.0:
            return None
        acc = 0.0
        for i, w in zip(self.long, weights):
            acc += w / total
            if u < acc:
                return i
        return self.long[-1]

    def to_dict(self) -> dict:
        entries = []
        for state, ids in self.state_assignment_ids.items():
            cum = self.state_assignment_cum[state]
            probs = np.diff(np.concatenate([[0.0], cum]))
            entries.append({"state": list(state), "ids": ids.tolist(), "mass": probs.tolist()})
        return {
            "type": "priority_rounding",
            "short": list(self.short),
            "long": list(self.long),
            "cap": self.cap,
            "epsilon": self.epsilon,
            "contentious": sorted(self.contentious),
            "y": self.y.tolist(),
            "assignments": [list(a) for a in self.assignments],
            "occupancy": entries,
            "simplified": self.simplified,
        }

    @staticmethod
    def from_nlp(nlp, simplified: bool = False) -> "PriorityRoundingPolicy":
        """Build from a solved NlpSolution (non-degenerate)."""
        ids: dict[tuple[int, ...], list[tuple[int, float]]] = {}
        for (state, a_idx), mass in nlp.occupancy.items():
            if mass > 0.0:
                ids.setdefault(state, []).append((a_idx, mass))
        state_ids = {}
        state_cum = {}
        for state, pairs in ids.items():
            pairs.sort()
            state_ids[state] = np.array([p[0] for p in pairs], dtype=np.int64)
            state_cum[state] = np.cumsum([p[1] for p in pairs])
        return PriorityRoundingPolicy(
            short=tuple(nlp.classification.short),
            long=tuple(nlp.classification.long),
            cap=nlp.cap,
            epsilon=nlp.epsilon,
            contentious=frozenset(nlp.contentious),
            y=np.asarray(nlp.y, dtype=float),
            assignments=nlp.assignments,
            state_assignment_ids=state_ids,
            state_assignment_cum=state_cum,
            simplified=simplified,
        )


def priority_rounding_decide(
    policy: PriorityRoundingPolicy,
    short_state: tuple[int, ...],
    long_lengths: dict[int, int],
    j: int,
    buffers: VirtualBuffer,
    rng,
) -> PolicyDecision:
    """One customer arrival through sampling, matching & scheduling, and
    surplus matching.  Mutates ``buffers`` and reports the bookkeeping."""
    decision = PolicyDecision()
    assignment = policy.sample_assignment(short_state, rng.random())
    if assignment is None:
        decision.anomaly = f"state {short_state} carries no occupancy mass"
        i_short = None
    else:
        slot = assignment[j]
        i_short = policy.short[slot - 1] if slot > 0 else None
    i_long = policy.long_draw(j, rng.random())
    contentious = j in policy.contentious

    blocked_low_priority = False
    if i_short is not None:
        decision.match_to = i_short
        if contentious and i_long is not None:
            buffers.increment(i_long, j)
            decision.buffer_increment = (i_long, j)
    elif i_long is not None:
        if long_lengths.get(i_long, 0) > 0:
            decision.match_to = i_long
        else:
            blocked_low_priority = True

    if decision.match_to is None and contentious:
        if policy.simplified and blocked_low_priority:
            return decision
        i_dag = policy.surplus_draw(j, rng.random())
        if i_dag is not None:
            if buffers.get(i_dag, j) > 0 and long_lengths.get(i_dag, 0) > 0:
                decision.match_to = i_dag
                decision.surplus_match = True
            buffers.decrement(i_dag, j)
            decision.buffer_decrement = (i_dag, j)
    return decision


# ---------------------------------------------------------------------------
# Policy (de)serialization

_DESERIALIZERS: dict[str, Callable[[dict], Any]] = {}


def register_policy_type(tag: str, loader: Callable[[dict], Any]) -> None:
    _DESERIALIZERS[tag] = loader


def policy_from_dict(doc: dict):
    tag = doc.get("type")
    if tag == "static_threshold":
        return StaticThresholdPolicy(k=int(doc["k"]), p=float(doc["p"]), order=tuple(doc["order"]))
    if tag == "static_rate":
        return StaticRatePolicy(
            rates=np.asarray(doc["rates"], dtype=float),
            customer_rates=np.asarray(doc["customer_rates"], dtype=float),
        )
    if tag == "dlp_adaptive":
        return DlpAdaptivePolicy(AdaptivePolicyTable.from_dict(doc))
    if tag == "priority_rounding":
        ids = {}
        cum = {}
        for entry in doc["occupancy"]:
            state = tuple(entry["state"])
            ids[state] = np.asarray(entry["ids"], dtype=np.int64)
            cum[state] = np.cumsum(entry["mass"])
        return PriorityRoundingPolicy(
            short=tuple(doc["short"]),
            long=tuple(doc["long"]),
            cap=int(doc["cap"]),
            epsilon=float(doc["epsilon"]),
            contentious=frozenset(doc["contentious"]),
            y=np.asarray(doc["y"], dtype=float),
            assignments=tuple(tuple(a) for a in doc["assignments"]),
            state_assignment_ids=ids,
            state_assignment_cum=cum,
            simplified=bool(doc.get("simplified", False)),
        )
    loader = _DESERIALIZERS.get(tag)
    if loader is not None:
        return loader(doc)
    raise InvalidInstance(f"unknown policy type {tag!r}")
