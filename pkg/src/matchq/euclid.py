"""Euclidean pipeline: random grid, non-crossing reduction, per-cell local
instances, the throughput-allocation (knapsack) LP, inner-grid clustering,
and assembly of the composite cell policy.

Costs are Euclidean distances between type locations in [0,1]^d.  A random
shifted grid of side eta = 16 d c* / (eps^2 tau*) splits space into cells;
matching is restricted to within-cell pairs, per-cell throughput targets come
from a small LP over discretized targets, and each cell is clustered to an
inner grid before running the constant-size machinery.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import lpsolve, network
from .errors import InfeasibleTarget, InvalidInstance
from .instance import Accuracy, Instance, Target
from .policies import PriorityRoundingPolicy, VirtualBuffer, register_policy_type

_COORD_QUANTUM = 1e-9  # tolerance for unique-cell signature matching


@dataclass(frozen=True)
class EuclideanInstance(Instance):
    supplier_locations: np.ndarray = field(kw_only=True, default=None)
    customer_locations: np.ndarray = field(kw_only=True, default=None)

    def __post_init__(self):
        Instance.__post_init__(self)
        sup = np.asarray(self.supplier_locations, dtype=float)
        cus = np.asarray(self.customer_locations, dtype=float)
        if sup.ndim != 2 or cus.ndim != 2 or sup.shape[1] != cus.shape[1]:
            raise InvalidInstance("locations must be 2-d arrays with a common dimension")
        if sup.shape[0] != self.n or cus.shape[0] != self.m:
            raise InvalidInstance("location counts must match type counts")
        if np.any(sup < -1e-12) or np.any(sup > 1 + 1e-12) or np.any(cus < -1e-12) or np.any(cus > 1 + 1e-12):
            raise InvalidInstance("locations must lie in the unit cube")
        dist = np.linalg.norm(sup[:, None, :] - cus[None, :, :], axis=2)
        if np.abs(dist - self.costs).max() > 1e-12:
            raise InvalidInstance("cost matrix deviates from pairwise distances")
        sup.setflags(write=False)
        cus.setflags(write=False)
        object.__setattr__(self, "supplier_locations", sup)
        object.__setattr__(self, "customer_locations", cus)

    @property
    def dim(self) -> int:
        return self.supplier_locations.shape[1]

    @staticmethod
    def from_locations(supplier_rates, customer_rates, supplier_locations, customer_locations, mu: float = 1.0) -> "EuclideanInstance":
        sup = np.asarray(supplier_locations, dtype=float)
        cus = np.asarray(customer_locations, dtype=float)
        costs = np.linalg.norm(sup[:, None, :] - cus[None, :, :], axis=2)
        return EuclideanInstance(
            supplier_rates,
            customer_rates,
            costs,
            abandonment_rate=mu,
            supplier_locations=sup,
            customer_locations=cus,
        )

    @staticmethod
    def from_document(inst: Instance, locations: dict) -> "EuclideanInstance":
        try:
            sup = np.asarray(locations["suppliers"], dtype=float)
            cus = np.asarray(locations["customers"], dtype=float)
        except (KeyError, TypeError) as exc:
            raise InvalidInstance("locations must carry 'suppliers' and 'customers' arrays") from exc
        return EuclideanInstance(
            inst.supplier_rates,
            inst.customer_rates,
            np.linalg.norm(sup[:, None, :] - cus[None, :, :], axis=2),
            abandonment_rate=inst.abandonment_rate,
            supplier_locations=sup,
            customer_locations=cus,
        )

    def to_dict(self) -> dict[str, Any]:
        doc = Instance.to_dict(self)
        doc["locations"] = {
            "suppliers": self.supplier_locations.tolist(),
            "customers": self.customer_locations.tolist(),
        }
        return doc


@dataclass(frozen=True)
class Cell:
    cell_id: tuple
    origin: np.ndarray
    suppliers: tuple[int, ...]
    customers: tuple[int, ...]


@dataclass(frozen=True)
class CellDecomposition:
    eta: float
    shift: np.ndarray
    cells: tuple[Cell, ...]
    unique_index: tuple[int, ...]  # per cell, index of its equivalence class
    multiplicities: tuple[int, ...]  # r_u per class

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @property
    def num_unique(self) -> int:
        return len(self.multiplicities)

    def representative(self, u: int) -> Cell:
        return self.cells[self.unique_index.index(u)]

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "shift": self.shift.tolist(),
            "cells": [
                {
                    "id": list(c.cell_id),
                    "origin": c.origin.tolist(),
                    "suppliers": list(c.suppliers),
                    "customers": list(c.customers),
                    "unique_class": self.unique_index[k],
                }
                for k, c in enumerate(self.cells)
            ],
            "multiplicities": list(self.multiplicities),
        }


def grid_side(inst: EuclideanInstance, target: Target, acc: Accuracy) -> float:
    if target.throughput_floor <= 0 or target.cost_cap <= 0:
        raise InvalidInstance("grid construction needs positive cost cap and throughput floor")
    return 16.0 * inst.dim * target.cost_cap / (acc.epsilon**2 * target.throughput_floor)


def build_grid(inst: EuclideanInstance, target: Target, acc: Accuracy, rng) -> CellDecomposition:
    """Randomly shifted grid of side eta; only nonempty cells are kept.

    Cells are congruence-classed by the local coordinates and rates of their
    member types (1e-9 quantization), giving the unique classes and their
    multiplicities.
    """
    d = inst.dim
    eta = grid_side(inst, target, acc)
    if eta >= 1.0:
        shift = np.zeros(d)
        cell = Cell(("all",), np.zeros(d), tuple(range(inst.n)), tuple(range(inst.m)))
        return CellDecomposition(eta, shift, (cell,), (0,), (1,))
    shift = rng.uniform(0.0, eta, size=d)
    members: dict[tuple, dict[str, list[int]]] = {}
    for i, loc in enumerate(inst.supplier_locations):
        key = tuple(int(math.floor((loc[k] - shift[k]) / eta)) for k in range(d))
        members.setdefault(key, {"s": [], "c": []})["s"].append(i)
    for j, loc in enumerate(inst.customer_locations):
        key = tuple(int(math.floor((loc[k] - shift[k]) / eta)) for k in range(d))
        members.setdefault(key, {"c": [], "s": []})["c"].append(j)

    cells = []
    signatures = []
    for key in sorted(members):
        origin = shift + np.array(key, dtype=float) * eta
        sup = tuple(members[key]["s"])
        cus = tuple(members[key]["c"])
        cells.append(Cell(key, origin, sup, cus))
        sig_s = tuple(
            (_quantize(inst.supplier_locations[i] - origin), float(inst.supplier_rates[i]))
            for i in sup
        )
        sig_c = tuple(
            (_quantize(inst.customer_locations[j] - origin), float(inst.customer_rates[j]))
            for j in cus
        )
        signatures.append((tuple(sorted(sig_s)), tuple(sorted(sig_c))))
    classes: dict[tuple, int] = {}
    unique_index = []
    mult: list[int] = []
    for sig in signatures:
        if sig not in classes:
            classes[sig] = len(mult)
            mult.append(0)
        u = classes[sig]
        unique_index.append(u)
        mult[u] += 1
    return CellDecomposition(eta, shift, tuple(cells), tuple(unique_index), tuple(mult))


def _quantize(vec: np.ndarray) -> tuple[int, ...]:
    return tuple(int(round(v / _COORD_QUANTUM)) for v in vec)


def cell_instance(inst: EuclideanInstance, cell: Cell) -> EuclideanInstance | None:
    """Local instance over the cell's member types (None if either side is
    empty, in which case the cell cannot match anything)."""
    if not cell.suppliers or not cell.customers:
        return None
    return EuclideanInstance.from_locations(
        inst.supplier_rates[list(cell.suppliers)],
        inst.customer_rates[list(cell.customers)],
        inst.supplier_locations[list(cell.suppliers)],
        inst.customer_locations[list(cell.customers)],
        mu=inst.abandonment_rate,
    )


def inner_grid_side(target: Target, acc: Accuracy, d: int) -> float:
    return target.cost_cap * acc.epsilon / (target.throughput_floor * math.sqrt(d))


@dataclass(frozen=True)
class ClusteredCell:
    instance: Instance
    supplier_map: tuple[int, ...]  # local original supplier -> cluster index
    customer_map: tuple[int, ...]


def cluster_cell(local: EuclideanInstance, target: Target, acc: Accuracy, d: int | None = None) -> ClusteredCell:
    """Snap every location to the nearest inner-grid point; co-snapped types
    merge with summed rates and the cost matrix is recomputed."""
    d = d if d is not None else local.dim
    side = inner_grid_side(target, acc, d)
    origin_free = np.concatenate([local.supplier_locations, local.customer_locations])
    base = origin_free.min(axis=0)
    snapped_s = base + np.round((local.supplier_locations - base) / side) * side
    snapped_c = base + np.round((local.customer_locations - base) / side) * side

    s_keys: dict[tuple, int] = {}
    s_map, s_rates, s_locs = [], [], []
    for i in range(local.n):
        key = _quantize(snapped_s[i])
        if key not in s_keys:
            s_keys[key] = len(s_rates)
            s_rates.append(0.0)
            s_locs.append(snapped_s[i])
        s_map.append(s_keys[key])
        s_rates[s_keys[key]] += float(local.supplier_rates[i])
    c_keys: dict[tuple, int] = {}
    c_map, c_rates, c_locs = [], [], []
    for j in range(local.m):
        key = _quantize(snapped_c[j])
        if key not in c_keys:
            c_keys[key] = len(c_rates)
            c_rates.append(0.0)
            c_locs.append(snapped_c[j])
        c_map.append(c_keys[key])
        c_rates[c_keys[key]] += float(local.customer_rates[j])
    s_locs = np.array(s_locs)
    c_locs = np.array(c_locs)
    costs = np.linalg.norm(s_locs[:, None, :] - c_locs[None, :, :], axis=2)
    clustered = Instance(s_rates, c_rates, costs, abandonment_rate=local.abandonment_rate)
    return ClusteredCell(clustered, tuple(s_map), tuple(c_map))


@dataclass
class LocalPlan:
    policy: PriorityRoundingPolicy | None
    cost: float
    throughput_plan: float
    clustered: ClusteredCell | None


def local_phi_hat(local: EuclideanInstance | None, t: float, acc: Accuracy, target: Target) -> LocalPlan:
    """Approximate local-cell solve at throughput target t: cluster, then run
    the constant-size pipeline at accuracy eps/2.  Unattainable targets map to
    an infinite-cost marker."""
    if t <= 0.0:
        return LocalPlan(None, 0.0, 0.0, None)
    if local is None:
        return LocalPlan(None, math.inf, 0.0, None)
    clustered = cluster_cell(local, target, acc)
    half = Accuracy(acc.epsilon / 2.0)
    sub_target = Target(cost_cap=target.cost_cap, throughput_floor=t)
    try:
        _kappa, nlp = network.choose_kappa(clustered.instance, sub_target, half)
    except InfeasibleTarget:
        return LocalPlan(None, math.inf, 0.0, clustered)
    if nlp.retried_at_reduced_target:
        return LocalPlan(None, math.inf, 0.0, clustered)
    policy = PriorityRoundingPolicy.from_nlp(nlp)
    return LocalPlan(policy, nlp.objective, nlp.throughput, clustered)


@dataclass(frozen=True)
class DecompositionSolution:
    targets: tuple[float, ...]  # the discretized target set, ascending
    z: np.ndarray  # (num_unique, len(targets)) phi-hat costs
    x: np.ndarray  # LP assignment
    cell_targets: tuple[float, ...]  # tau_u per unique class (weighted mean)
    objective: float
    tau_grid_value: float

    def to_dict(self) -> dict:
        return {
            "targets": list(self.targets),
            "z": self.z.tolist(),
            "x": self.x.tolist(),
            "cell_targets": list(self.cell_targets),
            "objective": self.objective,
            "tau_grid_value": self.tau_grid_value,
        }


def discretized_targets(tau_g: float, acc: Accuracy, num_cells: int) -> tuple[float, ...]:
    if tau_g <= 0:
        return (0.0,)
    eps = acc.epsilon
    base = eps * tau_g / (2.0 * num_cells)
    top = int(math.ceil(math.log(2.0 * num_cells / eps) / math.log1p(eps)))
    return (0.0,) + tuple(base * (1.0 + eps) ** k for k in range(top + 1))


def solve_decomposition(
    inst: EuclideanInstance,
    decomp: CellDecomposition,
    target: Target,
    acc: Accuracy,
    tau_g: float,
    plan_cache: dict | None = None,
) -> DecompositionSolution:
    """Allocate discretized throughput targets to unique cells by LP.

    z(u, k) is the phi-hat cost of unique cell u at target zeta_k (infinite
    when unattainable; such columns are dropped).
    """
    g = decomp.num_cells
    targets = discretized_targets(tau_g, acc, g)
    zs = np.zeros((decomp.num_unique, len(targets)))
    cache = plan_cache if plan_cache is not None else {}
    for u in range(decomp.num_unique):
        local = cell_instance(inst, decomp.representative(u))
        for k, t in enumerate(targets):
            key = (u, round(t, 12))
            if key not in cache:
                cache[key] = local_phi_hat(local, t, acc, target)
            zs[u, k] = cache[key].cost

    lp = lpsolve.LinearProgram()
    idx = {}
    for u in range(decomp.num_unique):
        for k in range(len(targets)):
            if math.isfinite(zs[u, k]):
                idx[(u, k)] = lp.add_var(obj=zs[u, k], name=f"x[{u}][{k}]")
    for u in range(decomp.num_unique):
        cols = {idx[(u, k)]: 1.0 for k in range(len(targets)) if (u, k) in idx}
        if cols:
            lp.add_constraint(cols, "<=", float(decomp.multiplicities[u]), name=f"mult[{u}]")
    lp.add_constraint(
        {v: targets[k] for (u, k), v in idx.items() if targets[k] > 0},
        ">=",
        (1.0 - acc.epsilon) * tau_g,
        name="tau",
    )
    sol = lpsolve.solve(lp)
    if sol.status != "optimal":
        raise InfeasibleTarget(
            f"decomposition LP {sol.status} at tau_G={tau_g}",
            certificate={"tau_g": tau_g, "targets": targets},
        )
    x = np.zeros((decomp.num_unique, len(targets)))
    for (u, k), v in idx.items():
        x[u, k] = max(float(sol.x[v]), 0.0)
    cell_targets = tuple(
        float(np.dot(x[u], targets)) / decomp.multiplicities[u] for u in range(decomp.num_unique)
    )
    return DecompositionSolution(
        targets=targets,
        z=zs,
        x=x,
        cell_targets=cell_targets,
        objective=float(sol.objective),
        tau_grid_value=tau_g,
    )


def estimate_tau_g(
    inst: EuclideanInstance,
    decomp: CellDecomposition,
    target: Target,
    acc: Accuracy,
    plan_cache: dict | None = None,
) -> tuple[float, DecompositionSolution]:
    """Bisection on the largest grid throughput whose decomposition LP stays
    within the (1 + eps/2) cost budget; floored at eps * tau*."""
    cache = plan_cache if plan_cache is not None else {}
    budget = (1.0 + acc.epsilon / 2.0) * target.cost_cap + 1e-12

    def attempt(tau: float) -> DecompositionSolution | None:
        try:
            cand = solve_decomposition(inst, decomp, target, acc, tau, plan_cache=cache)
        except InfeasibleTarget:
            return None
        return cand if cand.objective <= budget else None

    hi = target.throughput_floor
    sol = attempt(hi)
    if sol is not None:
        return hi, sol
    lo = acc.epsilon * target.throughput_floor
    sol = attempt(lo)
    if sol is None:
        raise InfeasibleTarget(
            "no grid throughput above the floor eps*tau* fits the cost budget",
            certificate={"floor": lo},
        )
    best = (lo, sol)
    while hi - lo > (acc.epsilon / 4.0) * hi:
        mid = 0.5 * (lo + hi)
        cand = attempt(mid)
        if cand is not None:
            best = (mid, cand)
            lo = mid
        else:
            hi = mid
    return best


# ---------------------------------------------------------------------------
# Composite non-crossing policy


@dataclass
class CellRuntime:
    cell_index: int
    suppliers: tuple[int, ...]  # original supplier type ids in this cell
    customers: tuple[int, ...]
    supplier_cluster: tuple[int, ...]  # per local supplier, cluster index
    customer_cluster: tuple[int, ...]
    policy: PriorityRoundingPolicy | None
    clustered_costs: np.ndarray | None = None  # cluster-level cost matrix


@dataclass
class CompositeCellPolicy:
    """Routes every arrival to its cell's local policy; matches never cross
    cell boundaries (asserted per event by the engine)."""

    runtimes: list[CellRuntime]
    supplier_cell: np.ndarray  # original supplier type -> runtime index or -1
    customer_cell: np.ndarray
    n: int
    m: int

    @staticmethod
    def assemble(
        inst: EuclideanInstance,
        decomp: CellDecomposition,
        solution: DecompositionSolution,
        acc: Accuracy,
        target: Target,
        plan_cache: dict | None = None,
    ) -> "CompositeCellPolicy":
        cache = plan_cache if plan_cache is not None else {}
        runtimes = []
        supplier_cell = np.full(inst.n, -1, dtype=int)
        customer_cell = np.full(inst.m, -1, dtype=int)
        for ci, cell in enumerate(decomp.cells):
            u = decomp.unique_index[ci]
            tau_u = solution.cell_targets[u]
            local = cell_instance(inst, cell)
            plan_key = ("assemble", u, round(tau_u, 12))
            if plan_key not in cache:
                cache[plan_key] = local_phi_hat(local, tau_u, acc, target)
            plan = cache[plan_key]
            if plan.cost == math.inf:
                raise InfeasibleTarget(f"cell {cell.cell_id} cannot attain its rounded target {tau_u}")
            runtime = CellRuntime(
                cell_index=ci,
                suppliers=cell.suppliers,
                customers=cell.customers,
                supplier_cluster=plan.clustered.supplier_map if plan.clustered else (),
                customer_cluster=plan.clustered.customer_map if plan.clustered else (),
                policy=plan.policy,
                clustered_costs=plan.clustered.instance.costs if plan.clustered else None,
            )
            rt_idx = len(runtimes)
            runtimes.append(runtime)
            for i in cell.suppliers:
                supplier_cell[i] = rt_idx
            for j in cell.customers:
                customer_cell[j] = rt_idx
        return CompositeCellPolicy(runtimes, supplier_cell, customer_cell, inst.n, inst.m)

    def clustered_pair_cost(self, i: int, j: int) -> float | None:
        """Cost of the (i, j) pair in the clustered geometry (the cost the
        policy was planned against); None if the pair can never match."""
        rt_i = int(self.supplier_cell[i])
        if rt_i < 0 or rt_i != int(self.customer_cell[j]):
            return None
        rt = self.runtimes[rt_i]
        if rt.clustered_costs is None:
            return None
        si = rt.supplier_cluster[rt.suppliers.index(i)]
        cj = rt.customer_cluster[rt.customers.index(j)]
        return float(rt.clustered_costs[si, cj])

    def clustered_cost_rate(self, tau_hat: np.ndarray) -> float:
        """Cost rate of the measured match-rate matrix priced at clustered
        costs (for the clustering cost-shift check)."""
        total = 0.0
        for i in range(self.n):
            for j in range(self.m):
                if tau_hat[i, j] > 0.0:
                    c = self.clustered_pair_cost(i, j)
                    if c is not None:
                        total += tau_hat[i, j] * c
        return total

    def prepare_tracked(self, inst: Instance, rng):
        """Adapter for the tracked simulation engine."""
        runtimes = self.runtimes
        supplier_cell = self.supplier_cell
        customer_cell = self.customer_cell
        # Per runtime: cluster membership of original queues, samplers, buffers.
        per_rt = []
        for rt in runtimes:
            if rt.policy is None:
                per_rt.append(None)
                continue
            clusters: dict[int, list[int]] = {}
            for local_i, orig in enumerate(rt.suppliers):
                clusters.setdefault(rt.supplier_cluster[local_i], []).append(orig)
            per_rt.append(
                {
                    "policy": rt.policy,
                    "clusters": clusters,
                    "buffers": VirtualBuffer(),
                    "short": rt.policy.short,
                }
            )

        def decide(j, state, uni):
            rt_idx = customer_cell[j]
            if rt_idx < 0:
                return None
            ctx = per_rt[rt_idx]
            if ctx is None:
                return None
            rt = runtimes[rt_idx]
            policy: PriorityRoundingPolicy = ctx["policy"]
            jc = rt.customer_cluster[rt.customers.index(j)]
            clusters = ctx["clusters"]
            # Cluster-queue lengths from the tracked global state.
            short_state = tuple(
                min(sum(state[i] for i in clusters.get(c, ())), policy.cap)
                for c in policy.short
            )
            long_lengths = {
                c: sum(state[i] for i in clusters.get(c, ())) for c in policy.long
            }
            from .policies import priority_rounding_decide

            decision = priority_rounding_decide(
                policy, short_state, long_lengths, jc, ctx["buffers"], _RngShim(uni)
            )
            if decision.match_to is None:
                return None
            queues = [i for i in clusters.get(decision.match_to, ()) if state[i] > 0]
            if not queues:
                return None
            weights = [state[i] for i in queues]
            total = sum(weights)
            u = uni.next() * total
            accum = 0.0
            for i, w in zip(queues, weights):
                accum += w
                if u < accum:
                    return i
            return queues[-1]

        def same_cell(i, j):
            return supplier_cell[i] == customer_cell[j] and supplier_cell[i] >= 0

        # Cap short cluster queues at the policy cap: enforced by discarding
        # arrivals that would push the *cluster* length past the cap.
        caps = None
        return {"decide": decide, "same_cell": same_cell, "caps": caps}

    def to_dict(self) -> dict:
        return {
            "type": "composite_cells",
            "n": self.n,
            "m": self.m,
            "supplier_cell": self.supplier_cell.tolist(),
            "customer_cell": self.customer_cell.tolist(),
            "cells": [
                {
                    "cell_index": rt.cell_index,
                    "suppliers": list(rt.suppliers),
                    "customers": list(rt.customers),
                    "supplier_cluster": list(rt.supplier_cluster),
                    "customer_cluster": list(rt.customer_cluster),
                    "policy": rt.policy.to_dict() if rt.policy else None,
                }
                for rt in self.runtimes
            ],
        }

    @staticmethod
    def from_dict(doc: dict) -> "CompositeCellPolicy":
        from .policies import policy_from_dict

        runtimes = []
        for entry in doc["cells"]:
            runtimes.append(
                CellRuntime(
                    cell_index=int(entry["cell_index"]),
                    suppliers=tuple(entry["suppliers"]),
                    customers=tuple(entry["customers"]),
                    supplier_cluster=tuple(entry["supplier_cluster"]),
                    customer_cluster=tuple(entry["customer_cluster"]),
                    policy=policy_from_dict(entry["policy"]) if entry["policy"] else None,
                )
            )
        return CompositeCellPolicy(
            runtimes,
            np.asarray(doc["supplier_cell"], dtype=int),
            np.asarray(doc["customer_cell"], dtype=int),
            int(doc["n"]),
            int(doc["m"]),
        )


class _RngShim:
    """Expose the block-buffered uniform stream through the rng.random()
    interface used by policy decision functions."""

    __slots__ = ("uni",)

    def __init__(self, uni):
        self.uni = uni

    def random(self) -> float:
        return self.uni.next()


register_policy_type("composite_cells", CompositeCellPolicy.from_dict)


def solve_euclidean(
    inst: EuclideanInstance,
    target: Target,
    acc: Accuracy,
    rng,
) -> tuple[CellDecomposition, DecompositionSolution, CompositeCellPolicy]:
    """Full pipeline: grid draw, tau_G estimation, decomposition LP, assembly."""
    target.validate_for(inst)
    decomp = build_grid(inst, target, acc, rng)
    cache: dict = {}
    tau_g, solution = estimate_tau_g(inst, decomp, target, acc, plan_cache=cache)
    policy = CompositeCellPolicy.assemble(inst, decomp, solution, acc, target, plan_cache=cache)
    return decomp, solution, policy
