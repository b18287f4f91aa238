import math

import numpy as np
import pytest
from scipy.stats import poisson

from matchq import ctmc
from matchq.errors import SolverFailure


def test_no_match_chain_is_poisson():
    for lam in (0.5, 2.0, 10.0):
        spec = ctmc.BirthDeathSpec(birth=lambda _l, lam=lam: lam, death=lambda l: float(l))
        dist = ctmc.birth_death_stationary(spec)
        support = np.arange(dist.support)
        expected = poisson.pmf(support, lam)
        rel = np.abs(dist.probs - expected) / expected
        assert rel.max() <= 1e-9


def test_zero_birth_is_point_mass_at_empty():
    spec = ctmc.BirthDeathSpec(birth=lambda _l: 0.0, death=lambda l: float(l))
    dist = ctmc.birth_death_stationary(spec)
    assert dist.probs.tolist() == [1.0]


def test_depletion_probability_bound():
    # Service at the arrival rate plus unit abandonment keeps the empty-state
    # probability below sqrt(eps) once the arrival rate reaches 1/eps.
    for eps in (0.1, 0.04, 0.01):
        lam = 1.0 / eps
        spec = ctmc.BirthDeathSpec(birth=lambda _l, lam=lam: lam, death=lambda l, lam=lam: l + lam)
        dist = ctmc.birth_death_stationary(spec)
        assert dist.prob(0) <= math.sqrt(eps)


def test_detailed_balance_property():
    rng = np.random.default_rng(5)
    for _ in range(25):
        lam = float(rng.uniform(0.2, 8.0))
        service = float(rng.uniform(0.0, 4.0))
        spec = ctmc.BirthDeathSpec(
            birth=lambda _l, lam=lam: lam, death=lambda l, s=service: s + float(l)
        )
        dist = ctmc.birth_death_stationary(spec)
        for level in range(1, dist.support):
            lhs = lam * dist.prob(level - 1)
            rhs = (service + level) * dist.prob(level)
            assert abs(lhs - rhs) <= 1e-9 * max(lhs, rhs, 1e-300)


def test_capped_chain():
    spec = ctmc.BirthDeathSpec(birth=lambda _l: 1.0, death=lambda l: float(l), cap=2)
    dist = ctmc.birth_death_stationary(spec)
    assert dist.support == 3
    assert dist.probs.sum() == pytest.approx(1.0)


def test_divergent_chain_rejected():
    spec = ctmc.BirthDeathSpec(birth=lambda _l: 2.0, death=lambda l: 1.0)
    with pytest.raises(SolverFailure):
        ctmc.birth_death_stationary(spec)


def test_multivariate_matches_product_form():
    cap = 25
    states = list(range(cap + 1))

    def trans(s):
        out = []
        if s < cap:
            out.append((s + 1, 1.0))
        if s >= 1:
            out.append((s - 1, float(s)))
        return out

    mv, index = ctmc.multivariate_stationary(states, trans)
    bd = ctmc.birth_death_stationary(
        ctmc.BirthDeathSpec(birth=lambda _l: 1.0, death=lambda l: float(l), cap=cap)
    )
    assert mv.tv_distance(bd) <= 1e-8
    assert index[0] == 0


def test_multivariate_independent_queues_factorize():
    cap = 8
    lam = (1.0, 2.0)
    states = [(a, b) for a in range(cap + 1) for b in range(cap + 1)]

    def trans(s):
        out = []
        for q in range(2):
            if s[q] < cap:
                out.append((s[:q] + (s[q] + 1,) + s[q + 1 :], lam[q]))
            if s[q] >= 1:
                out.append((s[:q] + (s[q] - 1,) + s[q + 1 :], float(s[q])))
        return out

    joint, index = ctmc.multivariate_stationary(states, trans)
    marginals = []
    for q in range(2):
        bd = ctmc.birth_death_stationary(
            ctmc.BirthDeathSpec(birth=lambda _l, r=lam[q]: r, death=lambda l: float(l), cap=cap)
        )
        marginals.append(bd.probs)
    product = np.array([marginals[0][a] * marginals[1][b] for (a, b) in states])
    product /= product.sum()
    assert 0.5 * np.abs(joint.probs - product).sum() <= 1e-8


def test_single_state_chain():
    dist, _ = ctmc.multivariate_stationary([0], lambda s: [])
    assert dist.probs.tolist() == [1.0]


def test_reducible_chain_rejected():
    states = [0, 1]

    def trans(s):
        return [(1, 1.0)] if s == 0 else []

    with pytest.raises(SolverFailure, match="reducible"):
        ctmc.multivariate_stationary(states, trans)


def test_expected_queue_bound():
    for lam in (1.0, 10.0, 100.0):
        mean, bound = ctmc.expected_queue_bound_check(lam)
        assert mean <= bound
    mean, bound = ctmc.expected_queue_bound_check(1e-6)
    assert mean <= 1e-3
