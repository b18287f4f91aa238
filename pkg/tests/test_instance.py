import io
import json
import math

import numpy as np
import pytest

from matchq.errors import InvalidInstance
from matchq.instance import (
    Accuracy,
    Instance,
    Target,
    dump_instance,
    load_instance,
    merge_equal_cost_customers,
    rescale_abandonment,
)

HARD_DOC = json.dumps(
    {
        "suppliers": [{"rate": 4}],
        "customers": [{"rate": 2.4}, {"rate": 2.4}, {"rate": 7.2}],
        "costs": [[0, 0, 1]],
    }
)


def test_load_defaults_mu_to_one():
    inst = load_instance(HARD_DOC)
    assert inst.abandonment_rate == 1.0
    assert inst.n == 1 and inst.m == 3
    assert inst.tau_max == pytest.approx(12.0)
    assert inst.c_max == 1.0


def test_load_minimal_instance():
    inst = load_instance('{"suppliers": [{"rate": 1}], "customers": [{"rate": 1}], "costs": [[0]]}')
    assert inst.n == inst.m == 1


def test_load_rejects_zero_rate():
    doc = '{"suppliers": [{"rate": 1}], "customers": [{"rate": 0}], "costs": [[0]]}'
    with pytest.raises(InvalidInstance):
        load_instance(doc)


@pytest.mark.parametrize(
    "doc",
    [
        "not json",
        '{"suppliers": [], "customers": [{"rate": 1}], "costs": []}',
        '{"suppliers": [{"rate": 1}], "customers": [{"rate": 1}], "costs": [[0, 1]]}',
        '{"suppliers": [{"rate": 1}], "customers": [{"rate": 1}], "costs": [[-2]]}',
        '{"suppliers": [{"rate": 1}], "customers": [{"rate": 1}]}',
    ],
)
def test_load_rejects_malformed(doc):
    with pytest.raises(InvalidInstance):
        load_instance(doc)


def test_roundtrip_is_bit_exact():
    inst = load_instance(HARD_DOC)
    text = dump_instance(inst)
    again = load_instance(text)
    assert np.array_equal(inst.supplier_rates, again.supplier_rates)
    assert np.array_equal(inst.customer_rates, again.customer_rates)
    assert np.array_equal(inst.costs, again.costs)
    assert inst.abandonment_rate == again.abandonment_rate


def test_load_from_binary_stream():
    inst = load_instance(io.BytesIO(HARD_DOC.encode()))
    assert inst.n == 1


def test_rescale_linear_time():
    inst = Instance([4.0], [2.0], [[0.5]], abandonment_rate=2.0)
    scaled = rescale_abandonment(inst)
    assert scaled.abandonment_rate == 1.0
    assert scaled.supplier_rates[0] == pytest.approx(2.0)
    assert scaled.customer_rates[0] == pytest.approx(1.0)
    assert np.array_equal(scaled.costs, inst.costs)


def test_rescale_identity_at_mu_one():
    inst = Instance([4.0], [2.0], [[0.5]])
    assert rescale_abandonment(inst) is inst


def test_rescale_roundtrip_exact():
    inst = Instance([4.0], [2.4, 2.4, 7.2], [[0, 0, 1]], abandonment_rate=0.5)
    scaled = rescale_abandonment(inst)
    assert np.array_equal(scaled.supplier_rates * 0.5, inst.supplier_rates)
    assert np.array_equal(scaled.customer_rates * 0.5, inst.customer_rates)


def test_rescale_preserves_dynamics_via_simulation():
    # Greedy matching on the original and the mu = 1 rescaled instance must
    # produce the same rates after undoing the time change.
    from matchq import sim
    from matchq.policies import StaticThresholdPolicy

    inst = Instance([4.0], [2.4, 2.4, 7.2], [[0.0, 0.0, 1.0]], abandonment_rate=0.5)
    scaled = rescale_abandonment(inst)
    greedy = StaticThresholdPolicy(k=3, p=1.0, order=(0, 1, 2))
    cfg = sim.SimConfig(horizon=4e4, seed=9)
    m_orig = sim.simulate(inst, greedy, cfg)
    m_scaled = sim.simulate(scaled, greedy, cfg)
    # Rates in the rescaled clock multiply back by mu.
    tol = 3 * (m_orig.throughput_stderr + 0.5 * m_scaled.throughput_stderr)
    assert abs(m_orig.throughput_rate - 0.5 * m_scaled.throughput_rate) < tol


def test_instances_are_immutable():
    inst = Instance([1.0], [1.0], [[0.0]])
    with pytest.raises(ValueError):
        inst.costs[0, 0] = 3.0


def test_merge_equal_cost_customers():
    inst = Instance([1.0], [1.0, 2.0, 3.0], [[0.5, 0.5, 1.0]])
    merged = merge_equal_cost_customers(inst)
    assert merged.m == 2
    assert merged.customer_rates.tolist() == [3.0, 3.0]
    # merging is opt-in, never automatic
    assert inst.m == 3


def test_target_validation(hard_instance):
    with pytest.raises(InvalidInstance):
        Target(cost_cap=-1.0, throughput_floor=0.0)
    with pytest.raises(InvalidInstance):
        Target(cost_cap=1.0, throughput_floor=13.0).validate_for(hard_instance)
    Target(cost_cap=math.inf, throughput_floor=3.0).validate_for(hard_instance)


def test_accuracy_cutoffs():
    acc = Accuracy(0.5)
    assert acc.delta(2) == pytest.approx(0.125)
    low, high = acc.rate_cutoffs(2, 1)
    assert low == pytest.approx(8.0)
    assert high == pytest.approx(64.0)
    with pytest.raises(InvalidInstance):
        Accuracy(1.0)
