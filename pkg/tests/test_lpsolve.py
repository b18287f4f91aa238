import math
from fractions import Fraction

import numpy as np
import pytest

from matchq import lpsolve


def _simple_lp():
    lp = lpsolve.LinearProgram()
    x = lp.add_var(obj=1.0, name="x")
    lp.add_constraint({x: 1.0}, ">=", 3.0, name="floor")
    return lp


@pytest.mark.parametrize("mode", ["float", "exact"])
def test_minimal_bound(mode):
    sol = lpsolve.solve(_simple_lp(), mode)
    assert sol.optimal
    assert sol.objective == pytest.approx(3.0, abs=1e-9)
    assert sol.x[0] == pytest.approx(3.0, abs=1e-9)
    assert sol.duals[0] == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("mode", ["float", "exact"])
def test_infeasible(mode):
    lp = lpsolve.LinearProgram()
    x = lp.add_var(obj=0.0)
    lp.add_constraint({x: 1.0}, "<=", -1.0)
    assert lpsolve.solve(lp, mode).status == "infeasible"


@pytest.mark.parametrize("mode", ["float", "exact"])
def test_unbounded(mode):
    lp = lpsolve.LinearProgram()
    lp.add_var(obj=-1.0)
    assert lpsolve.solve(lp, mode).status == "unbounded"


def test_exact_mode_gives_rationals():
    lp = lpsolve.LinearProgram()
    a = lp.add_var(obj=2.0)
    b = lp.add_var(obj=1.0)
    lp.add_constraint({a: 1.0, b: 1.0}, "=", 1.0)
    lp.add_constraint({a: 1.0, b: -1.0}, ">=", 0.0)
    sol = lpsolve.solve(lp, "exact")
    assert sol.exact_objective == Fraction(3, 2)
    f = lpsolve.solve(lp, "float")
    assert f.objective == pytest.approx(1.5, abs=1e-12)
    assert np.allclose(f.duals, sol.duals, atol=1e-9)


def test_weak_duality_on_random_lps():
    rng = np.random.default_rng(11)
    for _ in range(30):
        n, m = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        lp = lpsolve.LinearProgram()
        for j in range(n):
            lp.add_var(obj=float(rng.uniform(-1, 2)))
        for _r in range(m):
            coeffs = {j: float(rng.uniform(0.2, 2)) for j in range(n)}
            lp.add_constraint(coeffs, ">=", float(rng.uniform(0, 2)))
        sol = lpsolve.solve(lp)
        if not sol.optimal:
            continue
        dual_obj = sum(sol.duals[i] * lp.rows[i].rhs for i in range(lp.num_rows))
        assert dual_obj <= sol.objective + 1e-6 * (1 + abs(sol.objective))
        assert abs(dual_obj - sol.objective) <= 1e-6 * (1 + abs(sol.objective))


def test_repeat_solves_agree():
    lp = _simple_lp()
    a = lpsolve.solve(lp).objective
    b = lpsolve.solve(lp).objective
    assert abs(a - b) <= 1e-9


def test_dlp_matches_oracle_value(hard_instance, hard_target, acc10):
    # Cross-module check: the nested-family Dynamic LP equals the
    # brute-force constrained-MDP occupancy optimum.
    from matchq import dlp, oracle

    sol, _ = dlp.solve_dlp(hard_instance, hard_target, acc10)
    v = oracle.occupancy_lp_value(hard_instance, 3.0, sol.cap)
    assert abs(v - sol.objective) <= 1e-5


def test_export_lp_text():
    text = lpsolve.export_lp_text(_simple_lp())
    assert "Minimize" in text and "Subject To" in text and "floor" in text and "End" in text


def test_validation_errors():
    lp = lpsolve.LinearProgram()
    lp.add_var(obj=0.0)
    with pytest.raises(ValueError):
        lp.add_constraint({5: 1.0}, "<=", 1.0)
    with pytest.raises(ValueError):
        lp.add_constraint({0: 1.0}, "!!", 1.0)
    with pytest.raises(ValueError):
        lp.add_constraint({0: math.nan}, "<=", 1.0)
