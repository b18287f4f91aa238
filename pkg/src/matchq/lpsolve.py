"""Solver-agnostic linear programming layer.

All LP-building modules go through :class:`LinearProgram` / :func:`solve`.
Float mode is backed by HiGHS (via scipy); exact mode runs a self-contained
dense simplex over rationals with Bland's rule, used for small certifying
solves.  Duals are always reported in the sensitivity convention
``dual = d(optimum)/d(rhs)``: >= rows give nonnegative duals in a
minimization, <= rows nonpositive, equalities free.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp
from scipy.optimize import OptimizeWarning, linprog

from .errors import SolverFailure

SENSES = ("<=", "=", ">=")


@dataclass
class Row:
    coeffs: dict[int, float]
    sense: str
    rhs: float
    name: str = ""


@dataclass
class LinearProgram:
    """A minimization LP assembled incrementally.

    Variables default to bounds [0, inf).  ``meta`` is scratch space for
    builders (index maps etc.); the solver ignores it.
    """

    obj: list[float] = field(default_factory=list)
    lower: list[float] = field(default_factory=list)
    upper: list[float] = field(default_factory=list)
    var_names: list[str] = field(default_factory=list)
    rows: list[Row] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def num_vars(self) -> int:
        return len(self.obj)

    @property
    def num_rows(self) -> int:
        return len(self.rows)

    def add_var(self, obj: float = 0.0, lb: float = 0.0, ub: float = np.inf, name: str = "") -> int:
        if not np.isfinite(obj):
            raise ValueError("objective coefficient must be finite")
        self.obj.append(float(obj))
        self.lower.append(float(lb))
        self.upper.append(float(ub))
        self.var_names.append(name or f"x{len(self.obj) - 1}")
        return len(self.obj) - 1

    def add_constraint(self, coeffs: Mapping[int, float], sense: str, rhs: float, name: str = "") -> int:
        if sense not in SENSES:
            raise ValueError(f"sense must be one of {SENSES}, got {sense!r}")
        if not np.isfinite(rhs):
            raise ValueError("rhs must be finite")
        clean = {}
        for j, v in coeffs.items():
            if not (0 <= j < self.num_vars):
                raise ValueError(f"constraint references undeclared variable {j}")
            if not np.isfinite(v):
                raise ValueError(f"coefficient for variable {j} is not finite")
            if v != 0.0:
                clean[int(j)] = float(v)
        self.rows.append(Row(clean, sense, float(rhs), name or f"r{len(self.rows)}"))
        return len(self.rows) - 1


@dataclass
class LpSolution:
    status: str  # optimal | infeasible | unbounded | failure
    x: np.ndarray | None = None
    duals: np.ndarray | None = None
    objective: float | None = None
    exact_objective: Fraction | None = None
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def solve(lp: LinearProgram, mode: str = "float") -> LpSolution:
    if mode == "float":
        return _solve_float(lp)
    if mode == "exact":
        return _solve_exact(lp)
    raise ValueError(f"unknown mode {mode!r}")


def _solve_float(lp: LinearProgram) -> LpSolution:
    n = lp.num_vars
    eq_rows = [i for i, r in enumerate(lp.rows) if r.sense == "="]
    ub_rows = [i for i, r in enumerate(lp.rows) if r.sense != "="]

    def build(rows: list[int], flip_ge: bool) -> tuple[sp.csr_matrix, np.ndarray]:
        data, ri, ci = [], [], []
        rhs = np.zeros(len(rows))
        for k, i in enumerate(rows):
            row = lp.rows[i]
            sgn = -1.0 if (flip_ge and row.sense == ">=") else 1.0
            rhs[k] = sgn * row.rhs
            for j, v in row.coeffs.items():
                ri.append(k)
                ci.append(j)
                data.append(sgn * v)
        return sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n)), rhs

    a_eq, b_eq = build(eq_rows, flip_ge=False) if eq_rows else (None, None)
    a_ub, b_ub = build(ub_rows, flip_ge=True) if ub_rows else (None, None)
    bounds = list(zip(lp.lower, lp.upper))
    tight = {"primal_feasibility_tolerance": 1e-9, "dual_feasibility_tolerance": 1e-9}
    # HiGHS dual simplex sporadically aborts on birth-death chain LPs with
    # wide coefficient ranges; primal simplex without presolve, then interior
    # point, are the reliable fallbacks.
    attempts = [
        ("highs", tight),
        ("highs", {**tight, "presolve": False}),
        ("highs", {**tight, "presolve": False, "simplex_strategy": 4}),
        ("highs", {"presolve": False, "simplex_strategy": 4}),
        ("highs-ipm", {}),
    ]
    res = None
    for method, options in attempts:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OptimizeWarning)
            res = linprog(
                c=np.asarray(lp.obj),
                A_ub=a_ub,
                b_ub=b_ub,
                A_eq=a_eq,
                b_eq=b_eq,
                bounds=bounds,
                method=method,
                options=options,
            )
        if res.status == 0 and not _primal_feasible(res.x, a_eq, b_eq, a_ub, b_ub, bounds):
            res.status = 4  # claimed optimal but infeasible: keep trying
            continue
        if res.status in (0, 2, 3):
            break
    if res.status == 2:
        return LpSolution(status="infeasible", message=res.message)
    if res.status == 3:
        return LpSolution(status="unbounded", message=res.message)
    if res.status != 0:
        return LpSolution(status="failure", message=f"solver status {res.status}: {res.message}")

    duals = np.zeros(lp.num_rows)
    if eq_rows:
        for k, i in enumerate(eq_rows):
            duals[i] = res.eqlin.marginals[k]
    if ub_rows:
        for k, i in enumerate(ub_rows):
            m = res.ineqlin.marginals[k]
            duals[i] = -m if lp.rows[i].sense == ">=" else m
    return LpSolution(
        status="optimal",
        x=np.asarray(res.x),
        duals=duals,
        objective=float(res.fun),
        message=res.message,
    )


def _primal_feasible(x, a_eq, b_eq, a_ub, b_ub, bounds, tol: float = 1e-6) -> bool:
    """Independent residual check on a claimed-optimal point."""
    x = np.asarray(x)
    for j, (lo, hi) in enumerate(bounds):
        if x[j] < lo - tol or x[j] > hi + tol:
            return False
    if a_eq is not None and b_eq.size:
        scale = 1.0 + np.abs(b_eq)
        if (np.abs(a_eq @ x - b_eq) / scale).max() > tol:
            return False
    if a_ub is not None and b_ub.size:
        scale = 1.0 + np.abs(b_ub)
        if ((a_ub @ x - b_ub) / scale).max() > tol:
            return False
    return True


# ---------------------------------------------------------------------------
# Exact rational simplex (two-phase, Bland's rule).  Small models only.


def _solve_exact(lp: LinearProgram) -> LpSolution:
    n = lp.num_vars
    for lo, hi in zip(lp.lower, lp.upper):
        if lo != 0.0 or np.isfinite(hi):
            raise SolverFailure("exact mode supports only the default [0, inf) bounds")
    c = [Fraction(v).limit_denominator(10**12) if isinstance(v, float) else Fraction(v) for v in lp.obj]

    # Standard form rows with rhs >= 0; record sign flips for dual mapping.
    rows: list[tuple[dict[int, Fraction], str, Fraction, int]] = []
    for r in lp.rows:
        coeffs = {j: _to_frac(v) for j, v in r.coeffs.items()}
        rhs = _to_frac(r.rhs)
        sense, sgn = r.sense, 1
        if rhs < 0:
            coeffs = {j: -v for j, v in coeffs.items()}
            rhs = -rhs
            sgn = -1
            sense = {"<=": ">=", ">=": "<=", "=": "="}[sense]
        rows.append((coeffs, sense, rhs, sgn))

    m = len(rows)
    slack_of_row: dict[int, int] = {}
    num_slack = sum(1 for _, s, _, _ in rows if s != "=")
    total = n + num_slack + m  # structural + slacks + artificials
    tab = [[Fraction(0)] * total for _ in range(m)]
    b = [Fraction(0)] * m
    basis = [0] * m
    s_idx = n
    for i, (coeffs, sense, rhs, _) in enumerate(rows):
        for j, v in coeffs.items():
            tab[i][j] = v
        b[i] = rhs
        if sense != "=":
            tab[i][s_idx] = Fraction(1) if sense == "<=" else Fraction(-1)
            slack_of_row[i] = s_idx
            s_idx += 1
        art = n + num_slack + i
        tab[i][art] = Fraction(1)
        basis[i] = art

    # Phase 1: minimize sum of artificials.
    phase1 = [Fraction(0)] * total
    for i in range(m):
        phase1[n + num_slack + i] = Fraction(1)
    z1 = _simplex_iterate(tab, b, basis, phase1, allowed=total)
    if z1 is None:
        return LpSolution(status="failure", message="phase-1 unbounded (should not happen)")
    if z1 > 0:
        return LpSolution(status="infeasible", message="phase-1 optimum positive")
    # Pivot remaining artificials out where possible.
    for i in range(m):
        if basis[i] >= n + num_slack:
            for j in range(n + num_slack):
                if tab[i][j] != 0:
                    _pivot(tab, b, basis, i, j)
                    break

    c_full = c + [Fraction(0)] * (total - n)
    z2 = _simplex_iterate(tab, b, basis, c_full, allowed=n + num_slack)
    if z2 is None:
        return LpSolution(status="unbounded", message="objective unbounded below")

    x = np.zeros(n)
    x_frac = [Fraction(0)] * n
    for i, bi in enumerate(basis):
        if bi < n:
            x_frac[bi] = b[i]
            x[bi] = float(b[i])
    obj_frac = sum(ci * xi for ci, xi in zip(c, x_frac))

    duals = _exact_duals(lp, rows, tab, b, basis, c_full, n, num_slack, slack_of_row)
    return LpSolution(
        status="optimal",
        x=x,
        duals=duals,
        objective=float(obj_frac),
        exact_objective=obj_frac,
        message="exact simplex",
    )


def _to_frac(v) -> Fraction:
    return Fraction(v) if not isinstance(v, float) else Fraction(v).limit_denominator(10**12)


def _simplex_iterate(tab, b, basis, cost, allowed: int) -> Fraction | None:
    """Run Bland-rule simplex over columns [0, allowed); returns optimum or None if unbounded."""
    m = len(tab)
    basic = set(basis)
    while True:
        cb = [cost[basis[i]] for i in range(m)]
        entering = -1
        for j in range(allowed):
            if j in basic:
                continue
            # tab[:, j] already holds B^-1 A_j, so the reduced cost is direct.
            red = cost[j] - sum(cb[i] * tab[i][j] for i in range(m))
            if red < 0:
                entering = j
                break
        if entering < 0:
            return sum(cb[i] * b[i] for i in range(m))
        leaving, best = -1, None
        for i in range(m):
            if tab[i][entering] > 0:
                ratio = b[i] / tab[i][entering]
                if best is None or ratio < best or (ratio == best and basis[i] < basis[leaving]):
                    best, leaving = ratio, i
        if leaving < 0:
            return None
        basic.discard(basis[leaving])
        basic.add(entering)
        _pivot(tab, b, basis, leaving, entering)


def _pivot(tab, b, basis, i, j):
    inv = 1 / tab[i][j]
    tab[i] = [v * inv for v in tab[i]]
    b[i] *= inv
    for r in range(len(tab)):
        if r != i and tab[r][j] != 0:
            f = tab[r][j]
            tab[r] = [v - f * w for v, w in zip(tab[r], tab[i])]
            b[r] -= f * b[i]
    basis[i] = j


def _exact_duals(lp, rows, tab, b, basis, c_full, n, num_slack, slack_of_row) -> np.ndarray:
    # Artificial i carries the original unit column e_i, so its transformed
    # column is B^-1 e_i and y_i = c_B . tab[:, art_i].
    m = len(tab)
    duals = np.zeros(len(lp.rows))
    for i, (_, _, _, sgn) in enumerate(rows):
        art = n + num_slack + i
        y_i = sum(c_full[basis[r]] * tab[r][art] for r in range(m))
        duals[i] = float(sgn * y_i)
    return duals


# ---------------------------------------------------------------------------


def export_lp_text(lp: LinearProgram) -> str:
    """Render the model in CPLEX LP text format for external validation."""
    out = ["Minimize", " obj: " + _lin_expr(dict(enumerate(lp.obj)), lp)]
    out.append("Subject To")
    rel = {"<=": "<=", ">=": ">=", "=": "="}
    for r in lp.rows:
        out.append(f" {r.name}: {_lin_expr(r.coeffs, lp)} {rel[r.sense]} {r.rhs:.17g}")
    out.append("Bounds")
    for j, (lo, hi) in enumerate(zip(lp.lower, lp.upper)):
        hi_txt = "+inf" if np.isinf(hi) else f"{hi:.17g}"
        out.append(f" {lo:.17g} <= {lp.var_names[j]} <= {hi_txt}")
    out.append("End")
    return "\n".join(out) + "\n"


def _lin_expr(coeffs: Mapping[int, float], lp: LinearProgram) -> str:
    terms = []
    for j in sorted(coeffs):
        v = coeffs[j]
        if v == 0:
            continue
        sign = "-" if v < 0 else ("+" if terms else "")
        terms.append(f"{sign} {abs(v):.17g} {lp.var_names[j]}".strip())
    return " ".join(terms) if terms else "0"
