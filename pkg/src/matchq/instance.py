"""Core data model: matching instances, cost/throughput targets, accuracy knobs.

An instance is a bipartite market: supplier types arrive with Poisson rates
``lambda_i`` and abandon at exponential rate ``mu``; customer types arrive with
rates ``gamma_j`` and are matched on arrival or lost.  Matching supplier ``i``
to customer ``j`` costs ``c[i, j]``.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import IO, Any

import numpy as np

from .errors import InvalidInstance


def _frozen_array(values, shape_hint: str, ndim: int) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != ndim:
        raise InvalidInstance(f"{shape_hint}: expected {ndim}-dimensional data, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Instance:
    """Immutable dynamic-matching instance.

    Values are safe to share across concurrent workers.
    """

    supplier_rates: np.ndarray
    customer_rates: np.ndarray
    costs: np.ndarray
    abandonment_rate: float = 1.0

    def __post_init__(self):
        lam = _frozen_array(self.supplier_rates, "supplier_rates", 1)
        gam = _frozen_array(self.customer_rates, "customer_rates", 1)
        c = _frozen_array(self.costs, "costs", 2)
        object.__setattr__(self, "supplier_rates", lam)
        object.__setattr__(self, "customer_rates", gam)
        object.__setattr__(self, "costs", c)
        object.__setattr__(self, "abandonment_rate", float(self.abandonment_rate))
        if lam.size < 1 or gam.size < 1:
            raise InvalidInstance("need at least one supplier type and one customer type")
        if c.shape != (lam.size, gam.size):
            raise InvalidInstance(f"cost matrix shape {c.shape} does not match ({lam.size}, {gam.size})")
        for name, arr in (("supplier rate", lam), ("customer rate", gam)):
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise InvalidInstance(f"every {name} must be strictly positive and finite")
        if not np.all(np.isfinite(c)) or np.any(c < 0):
            raise InvalidInstance("costs must be finite and nonnegative")
        if not math.isfinite(self.abandonment_rate) or self.abandonment_rate < 0:
            raise InvalidInstance("abandonment rate must be finite and nonnegative")

    @property
    def n(self) -> int:
        return self.supplier_rates.size

    @property
    def m(self) -> int:
        return self.customer_rates.size

    @property
    def tau_max(self) -> float:
        """Upper bound on any achievable throughput rate (total customer rate)."""
        return float(self.customer_rates.sum())

    @property
    def c_max(self) -> float:
        return float(self.costs.max())

    def single_queue(self) -> bool:
        return self.n == 1

    def with_abandonment(self, mu: float) -> "Instance":
        return replace(self, abandonment_rate=mu)

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "suppliers": [{"rate": float(r)} for r in self.supplier_rates],
            "customers": [{"rate": float(r)} for r in self.customer_rates],
            "costs": [[float(v) for v in row] for row in self.costs],
        }
        if self.abandonment_rate != 1.0:
            doc["mu"] = self.abandonment_rate
        return doc


@dataclass(frozen=True)
class Target:
    """Cost/throughput target: keep cost rate <= cost_cap, throughput >= throughput_floor."""

    cost_cap: float
    throughput_floor: float

    def __post_init__(self):
        if math.isnan(self.cost_cap) or self.cost_cap < 0:
            raise InvalidInstance("cost cap must be nonnegative (inf = uncapped)")
        if not math.isfinite(self.throughput_floor) or self.throughput_floor < 0:
            raise InvalidInstance("throughput floor must be finite and nonnegative")

    def validate_for(self, inst: Instance) -> None:
        if self.throughput_floor > inst.tau_max + 1e-12:
            raise InvalidInstance(
                f"throughput floor {self.throughput_floor} exceeds total customer rate {inst.tau_max}"
            )


@dataclass(frozen=True)
class Accuracy:
    """Approximation accuracy epsilon in (0, 1) plus the derived cutoffs."""

    epsilon: float

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise InvalidInstance("epsilon must lie strictly between 0 and 1")

    def delta(self, n: int) -> float:
        return self.epsilon**2 / n

    def rate_cutoffs(self, n: int, kappa: int) -> tuple[float, float]:
        """(low, high) arrival-rate cutoffs for the short/long split at this kappa."""
        d = self.delta(n)
        return d**-kappa, d ** -(kappa + 1)

    def kappa_range(self, n: int) -> range:
        upper = int(min(1.0 / self.epsilon, n)) + 1
        return range(1, upper + 1)


def load_instance(source: bytes | str | IO) -> Instance:
    """Parse an instance document (JSON) into an Instance.

    Documents with a ``locations`` block yield a Euclidean instance whose cost
    matrix is recomputed from the coordinates.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    elif hasattr(source, "read"):
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    else:
        raise InvalidInstance(f"unsupported instance source {type(source)!r}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInstance(f"instance document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise InvalidInstance("instance document must be a JSON object")
    for key in ("suppliers", "customers", "costs"):
        if key not in doc:
            raise InvalidInstance(f"instance document missing required key {key!r}")
    try:
        lam = [float(entry["rate"]) for entry in doc["suppliers"]]
        gam = [float(entry["rate"]) for entry in doc["customers"]]
    except (TypeError, KeyError) as exc:
        raise InvalidInstance("suppliers/customers must be arrays of objects with a 'rate' field") from exc
    mu = float(doc.get("mu", 1.0))
    if mu <= 0:
        raise InvalidInstance("mu must be strictly positive")
    inst = Instance(lam, gam, doc["costs"], abandonment_rate=mu)
    if "locations" in doc:
        from .euclid import EuclideanInstance  # deferred: euclid depends on this module

        return EuclideanInstance.from_document(inst, doc["locations"])
    return inst


def dump_instance(inst: Instance, fp: IO | None = None) -> str:
    """Serialize an instance back to its JSON document form."""
    text = json.dumps(inst.to_dict(), indent=2)
    if fp is not None:
        fp.write(text)
    return text


def loads(text: str) -> Instance:
    return load_instance(text)


def load_path(path) -> Instance:
    with io.open(path, "rb") as fh:
        return load_instance(fh)


def rescale_abandonment(inst: Instance) -> Instance:
    """Equivalent instance with mu = 1 via a linear time rescale.

    Rates divide by mu; costs are per match and do not change.  Cost and
    throughput *rates* of the returned instance are the original ones divided
    by mu.
    """
    mu = inst.abandonment_rate
    if mu == 0:
        raise InvalidInstance("cannot rescale an instance with mu = 0")
    if mu == 1.0:
        return inst
    return Instance(
        inst.supplier_rates / mu,
        inst.customer_rates / mu,
        inst.costs,
        abandonment_rate=1.0,
    )


def merge_equal_cost_customers(inst: Instance, tol: float = 0.0) -> Instance:
    """Merge customer types whose cost columns coincide; arrival rates add.

    Kept as an explicit preprocessing step (never applied automatically) so
    tie handling stays observable.
    """
    groups: list[list[int]] = []
    for j in range(inst.m):
        for grp in groups:
            if np.all(np.abs(inst.costs[:, j] - inst.costs[:, grp[0]]) <= tol):
                grp.append(j)
                break
        else:
            groups.append([j])
    if len(groups) == inst.m:
        return inst
    gam = [float(inst.customer_rates[grp].sum()) for grp in groups]
    costs = np.stack([inst.costs[:, grp[0]] for grp in groups], axis=1)
    return Instance(inst.supplier_rates, gam, costs, abandonment_rate=inst.abandonment_rate)
