"""Exact steady-state computation for birth-death chains and bounded CTMCs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .errors import SolverFailure

# Beyond this many states the global-balance system switches from a direct
# sparse solve to power iteration on the uniformized chain.
_DIRECT_SOLVE_LIMIT = 200_000
_MAX_BD_STATES = 5_000_000


@dataclass(frozen=True)
class BirthDeathSpec:
    """A birth-death chain: birth(l) for l >= 0, death(l) for l >= 1.

    Without a cap, death must eventually dominate birth (abandonment
    guarantees this in every chain we build).
    """

    birth: Callable[[int], float]
    death: Callable[[int], float]
    cap: int | None = None


@dataclass(frozen=True)
class StationaryDistribution:
    probs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    @property
    def support(self) -> int:
        return self.probs.size

    def mean(self) -> float:
        return float(np.dot(np.arange(self.probs.size), self.probs))

    def prob(self, state: int) -> float:
        return float(self.probs[state]) if 0 <= state < self.probs.size else 0.0

    def tv_distance(self, other: np.ndarray | "StationaryDistribution") -> float:
        q = other.probs if isinstance(other, StationaryDistribution) else np.asarray(other, dtype=float)
        k = max(self.probs.size, q.size)
        p_pad = np.zeros(k)
        q_pad = np.zeros(k)
        p_pad[: self.probs.size] = self.probs
        q_pad[: q.size] = q
        return 0.5 * float(np.abs(p_pad - q_pad).sum())


def birth_death_stationary(spec: BirthDeathSpec, tail_tol: float = 1e-12) -> StationaryDistribution:
    """Stationary distribution via the detailed-balance product recursion.

    pi_l is proportional to prod_{q<=l} birth(q-1)/death(q), computed in log
    space.  Uncapped chains are extended until the residual tail mass falls
    below tail_tol of the accumulated total *and* death/birth >= 2.
    """
    if tail_tol <= 0:
        raise ValueError("tail_tol must be positive")
    log_w = [0.0]  # log of unnormalized pi_l, l = 0 first
    level = 0
    log_total = 0.0
    while True:
        if spec.cap is not None and level >= spec.cap:
            break
        b = float(spec.birth(level))
        d = float(spec.death(level + 1))
        if d <= 0:
            raise SolverFailure(f"death rate must be positive at state {level + 1}, got {d}")
        if b < 0:
            raise SolverFailure(f"birth rate must be nonnegative at state {level}, got {b}")
        if b == 0.0:
            break  # chain cannot climb past this level
        log_w.append(log_w[-1] + math.log(b) - math.log(d))
        level += 1
        log_total = _logaddexp(log_total, log_w[-1])
        if spec.cap is None:
            ratio = d / b
            # Geometric tail bound: once death dominates, remaining mass is
            # at most the last weight / (ratio - 1).
            if ratio >= 2.0 and log_w[-1] - math.log(ratio - 1.0) < log_total + math.log(tail_tol):
                break
            if level > _MAX_BD_STATES:
                raise SolverFailure(
                    "birth-death recursion did not converge within "
                    f"{_MAX_BD_STATES} states; death rate never dominates birth"
                )
    arr = np.array(log_w)
    arr -= arr.max()
    probs = np.exp(arr)
    probs /= probs.sum()
    return StationaryDistribution(probs)


def _logaddexp(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def multivariate_stationary(
    states: Sequence[Hashable],
    transitions: Callable[[Hashable], Iterable[tuple[Hashable, float]]],
) -> tuple[StationaryDistribution, dict[Hashable, int]]:
    """Solve the global balance system pi Q = 0, sum(pi) = 1 on a finite chain.

    ``transitions(state)`` yields (successor, rate) pairs.  Returns the
    distribution indexed by position in ``states`` together with the
    state -> index map.  Raises on reducible chains, naming an unreachable
    class.
    """
    index = {s: i for i, s in enumerate(states)}
    k = len(index)
    if k != len(states):
        raise ValueError("states contains duplicates")
    if k == 0:
        raise ValueError("empty state space")
    rows, cols, vals = [], [], []
    for s, i in index.items():
        out_rate = 0.0
        for t, rate in transitions(s):
            if rate < 0:
                raise SolverFailure(f"negative transition rate {rate} from state {s!r}")
            if rate == 0.0 or t == s:
                continue
            j = index.get(t)
            if j is None:
                raise SolverFailure(f"transition from {s!r} leaves the declared state space: {t!r}")
            rows.append(i)
            cols.append(j)
            vals.append(rate)
            out_rate += rate
        rows.append(i)
        cols.append(i)
        vals.append(-out_rate)
    q = sp.csr_matrix((vals, (rows, cols)), shape=(k, k))

    n_comp, labels = csgraph.connected_components(q != 0, directed=True, connection="strong")
    if n_comp > 1 and k > 1:
        # Closed classes are the strong components with no outgoing edges; a
        # unique stationary distribution needs exactly one, reachable from all.
        stranded = [s for s, i in index.items() if labels[i] != labels[0]]
        raise SolverFailure(
            f"chain is reducible ({n_comp} strong components); e.g. states {stranded[:3]!r} "
            "are not mutually reachable with the rest"
        )

    if k == 1:
        return StationaryDistribution(np.array([1.0])), index

    if k <= _DIRECT_SOLVE_LIMIT:
        # Replace one balance column with the normalization row.
        a = q.T.tolil()
        a[k - 1, :] = 1.0
        b = np.zeros(k)
        b[k - 1] = 1.0
        try:
            if k <= 1500:
                pi = np.linalg.solve(a.toarray(), b)
            else:
                pi = spla.spsolve(a.tocsr(), b)
        except Exception as exc:  # pragma: no cover - numerical failure path
            raise SolverFailure(f"global balance solve failed: {exc}") from exc
    else:
        pi = _power_iteration(q)

    pi = np.maximum(pi, 0.0)
    total = pi.sum()
    if not np.isfinite(total) or total <= 0:
        raise SolverFailure("global balance solve produced a degenerate solution")
    pi /= total
    resid = np.abs(pi @ q.toarray() if k <= 1500 else (sp.csr_matrix(pi) @ q).toarray().ravel())
    scale = max(1.0, float(np.abs(q.data).max()))
    if resid.max() / scale > 1e-8:
        raise SolverFailure(f"global balance residual {resid.max():.3e} exceeds tolerance")
    return StationaryDistribution(pi), index


def _power_iteration(q: sp.csr_matrix, tol: float = 1e-10, max_iter: int = 2_000_000) -> np.ndarray:
    k = q.shape[0]
    unif = float(np.abs(q.diagonal()).max()) * 1.05 + 1e-12
    p = sp.eye(k, format="csr") + q / unif
    pi = np.full(k, 1.0 / k)
    for _ in range(max_iter):
        nxt = pi @ p
        nxt = np.asarray(nxt).ravel()
        if np.abs(nxt - pi).sum() < tol:
            return nxt
        pi = nxt
    raise SolverFailure("power iteration on the uniformized chain did not converge")


def expected_queue_bound_check(lam: float) -> tuple[float, float]:
    """Exact mean of the (birth lam, death l + lam) chain against sqrt(lam).

    The chain models a queue served at its own arrival rate with unit-rate
    abandonment; its stationary mean never exceeds sqrt(lam).
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    spec = BirthDeathSpec(birth=lambda _l: lam, death=lambda l: l + lam)
    dist = birth_death_stationary(spec, tail_tol=1e-14)
    return dist.mean(), math.sqrt(lam)
