import math

import numpy as np
import pytest

from matchq import dlp, euclid, network, sim
from matchq.errors import InfeasibleTarget, InvalidInstance
from matchq.instance import Accuracy, Instance, Target

EPS = 0.25
TAU = 3.0
CSTAR = 1e-3
ETA = 256 * CSTAR / TAU  # 16 d c* / (eps^2 tau*) at d = 1
ETA_IN = CSTAR * EPS / TAU


def desk_euclid() -> euclid.EuclideanInstance:
    base_a = 0.05
    base_b = base_a + 4 * ETA  # translate by a grid multiple: same cell class
    base_c = 0.75
    sup = [[base_a], [base_b], [base_c]]
    cus = [
        [base_a + 2 * ETA_IN * 0.96],
        [base_b + 2 * ETA_IN * 0.96],
        [base_c + 3 * ETA_IN],
    ]
    return euclid.EuclideanInstance.from_locations([3.0, 3.0, 4.0], [2.5, 2.5, 1.0], sup, cus)


@pytest.fixture(scope="module")
def pipeline():
    inst = desk_euclid()
    target = Target(cost_cap=CSTAR, throughput_floor=TAU)
    acc = Accuracy(EPS)
    rng = np.random.Generator(np.random.Philox(key=[123, 0]))
    decomp = euclid.build_grid(inst, target, acc, rng)
    cache = {}
    tau_g, dsol = euclid.estimate_tau_g(inst, decomp, target, acc, plan_cache=cache)
    policy = euclid.CompositeCellPolicy.assemble(inst, decomp, dsol, acc, target, plan_cache=cache)
    return inst, target, acc, decomp, tau_g, dsol, policy


def test_euclidean_instance_validation():
    inst = desk_euclid()
    assert inst.dim == 1
    with pytest.raises(InvalidInstance):
        euclid.EuclideanInstance(
            [1.0],
            [1.0],
            [[0.9]],  # inconsistent with the distance
            supplier_locations=np.array([[0.0]]),
            customer_locations=np.array([[0.5]]),
        )


def test_instance_document_roundtrip():
    from matchq.instance import dump_instance, load_instance

    inst = desk_euclid()
    doc = dump_instance(inst)
    again = load_instance(doc)
    assert isinstance(again, euclid.EuclideanInstance)
    assert np.allclose(again.supplier_locations, inst.supplier_locations)


def test_grid_side_formula():
    inst = desk_euclid()
    eta = euclid.grid_side(inst, Target(CSTAR, TAU), Accuracy(EPS))
    assert eta == pytest.approx(16 * 1 * CSTAR / (EPS**2 * TAU))


def test_grid_unique_classes(pipeline):
    _inst, _t, _a, decomp, *_ = pipeline
    assert decomp.num_cells == 3
    assert sorted(decomp.multiplicities) == [1, 2]  # translated twins share a class


def test_degenerate_single_cell_when_eta_large():
    inst = desk_euclid()
    target = Target(cost_cap=1.0, throughput_floor=1.0)  # eta >= 1
    rng = np.random.Generator(np.random.Philox(key=[1, 0]))
    decomp = euclid.build_grid(inst, target, Accuracy(EPS), rng)
    assert decomp.num_cells == 1
    assert decomp.cells[0].suppliers == (0, 1, 2)


def test_colocated_types_one_cell():
    inst = euclid.EuclideanInstance.from_locations([1.0], [1.0], [[0.4]], [[0.4]])
    rng = np.random.Generator(np.random.Philox(key=[2, 0]))
    decomp = euclid.build_grid(inst, Target(1e-4, 1.0), Accuracy(0.5), rng)
    nonempty = [c for c in decomp.cells if c.suppliers or c.customers]
    assert len(nonempty) == 1
    assert decomp.multiplicities == (1,)


def test_cluster_cell_identity_on_grid_points():
    target = Target(CSTAR, TAU)
    acc = Accuracy(EPS)
    side = euclid.inner_grid_side(target, acc, 1)
    local = euclid.EuclideanInstance.from_locations(
        [1.0], [1.0], [[0.0]], [[3 * side]]
    )
    clustered = euclid.cluster_cell(local, target, acc)
    assert clustered.instance.n == 1 and clustered.instance.m == 1
    assert clustered.instance.costs[0, 0] == pytest.approx(3 * side, abs=1e-15)


def test_cluster_cell_merges_nearby_types():
    target = Target(CSTAR, TAU)
    acc = Accuracy(EPS)
    side = euclid.inner_grid_side(target, acc, 1)
    local = euclid.EuclideanInstance.from_locations(
        [1.0],
        [1.0, 2.0],
        [[0.0]],
        [[side * 0.9], [side * 1.1]],  # both snap to the same inner-grid point
    )
    clustered = euclid.cluster_cell(local, target, acc)
    assert clustered.instance.m == 1
    assert clustered.instance.customer_rates[0] == pytest.approx(3.0)
    assert clustered.customer_map == (0, 0)


def test_cluster_shift_bound_random_cell():
    # each endpoint moves at most half the inner-grid diagonal, so a pair's
    # cost moves at most one full side length; checked exhaustively
    rng = np.random.default_rng(14)
    target = Target(CSTAR, TAU)
    acc = Accuracy(EPS)
    side = euclid.inner_grid_side(target, acc, 1)
    sup = rng.uniform(0.2, 0.2 + 20 * side, size=(2, 1))
    cus = rng.uniform(0.2, 0.2 + 20 * side, size=(2, 1))
    local = euclid.EuclideanInstance.from_locations([1.0, 1.0], [1.0, 1.0], sup, cus)
    clustered = euclid.cluster_cell(local, target, acc)
    base = np.concatenate([sup, cus]).min(axis=0)
    for i in range(2):  # per-location move bounded by half the grid side (d=1)
        snapped_loc = base + np.round((sup[i] - base) / side) * side
        assert abs(snapped_loc[0] - sup[i][0]) <= side / 2 + 1e-15
    worst = 0.0
    for i in range(2):
        for j in range(2):
            orig = local.costs[i, j]
            snapped = clustered.instance.costs[clustered.supplier_map[i], clustered.customer_map[j]]
            worst = max(worst, abs(orig - snapped))
    assert worst <= side + 1e-15


def test_local_phi_hat_zero_target():
    plan = euclid.local_phi_hat(None, 0.0, Accuracy(EPS), Target(CSTAR, TAU))
    assert plan.cost == 0.0 and plan.policy is None


def test_local_phi_hat_infeasible_marker():
    local = euclid.EuclideanInstance.from_locations([0.5], [0.5], [[0.1]], [[0.1]])
    plan = euclid.local_phi_hat(local, 5.0, Accuracy(EPS), Target(CSTAR, TAU))
    assert plan.cost == math.inf


def test_local_phi_hat_colocated_pair_is_free():
    local = euclid.EuclideanInstance.from_locations([2.0], [2.0], [[0.1]], [[0.1]])
    plan = euclid.local_phi_hat(local, 0.5, Accuracy(EPS), Target(CSTAR, TAU))
    assert plan.cost == pytest.approx(0.0, abs=1e-10)


def test_decomposition_trivial_cases(pipeline):
    inst, target, acc, decomp, *_ = pipeline
    zero = euclid.solve_decomposition(inst, decomp, target, acc, 0.0)
    assert zero.objective == pytest.approx(0.0, abs=1e-12)
    assert all(t == 0.0 for t in zero.cell_targets)


def test_decomposition_respects_multiplicity_and_floor(pipeline):
    inst, target, acc, decomp, tau_g, dsol, _pol = pipeline
    x = dsol.x
    for u in range(decomp.num_unique):
        assert x[u].sum() <= decomp.multiplicities[u] + 1e-9
    assert float((x * np.array(dsol.targets)[None, :]).sum()) >= (1 - EPS) * tau_g - 1e-9


def test_phi_convexity_surrogate(pipeline):
    # midpoint convexity of the phi-hat table along the discretized targets,
    # within the approximation error budget
    inst, target, acc, decomp, tau_g, dsol, _pol = pipeline
    slack = EPS * CSTAR / (2 * decomp.num_cells)
    z = dsol.z
    for u in range(z.shape[0]):
        finite = [k for k in range(z.shape[1]) if math.isfinite(z[u, k])]
        for a, b, c in zip(finite, finite[1:], finite[2:]):
            mid_value = np.interp(
                dsol.targets[b], [dsol.targets[a], dsol.targets[c]], [z[u, a], z[u, c]]
            )
            assert z[u, b] <= mid_value + slack + 1e-12


def test_assembled_policy_meets_contract(pipeline):
    inst, target, acc, decomp, tau_g, dsol, policy = pipeline
    mets = sim.simulate(inst, policy, sim.SimConfig(horizon=4e4, seed=5))
    assert mets.cross_cell_matches == 0
    assert mets.throughput_rate >= (1 - 2 * EPS) * tau_g - 3 * mets.throughput_stderr
    assert mets.cost_rate <= (1 + EPS) * CSTAR + 3 * mets.cost_stderr
    shift = abs(mets.cost_rate - policy.clustered_cost_rate(mets.tau_hat))
    assert shift <= EPS * CSTAR * mets.throughput_rate / (4 * TAU) + 3 * mets.cost_stderr


def test_single_cell_composite_equals_cell_policy():
    # a one-cell decomposition behaves exactly like its inner policy
    inst = euclid.EuclideanInstance.from_locations([2.0], [2.0], [[0.3]], [[0.3]])
    target = Target(1e-3, 1.0)
    acc = Accuracy(0.25)
    rng = np.random.Generator(np.random.Philox(key=[9, 0]))
    decomp, dsol, policy = euclid.solve_euclidean(inst, target, acc, rng)
    mets = sim.simulate(inst, policy, sim.SimConfig(horizon=2e4, seed=1))
    assert mets.cross_cell_matches == 0
    assert mets.throughput_rate >= (1 - 2 * acc.epsilon) * 1.0 - 3 * mets.throughput_stderr


def test_grid_shift_throughput_preserved():
    # averaging the attainable grid throughput over random shifts loses at
    # most an eps fraction against a no-grid reference
    inst = desk_euclid()
    target = Target(CSTAR, TAU)
    acc = Accuracy(EPS)
    values = []
    for k in range(30):
        rng = np.random.Generator(np.random.Philox(key=[1000 + k, 0]))
        decomp = euclid.build_grid(inst, target, acc, rng)
        try:
            tau_g, _ = euclid.estimate_tau_g(inst, decomp, target, acc)
        except InfeasibleTarget:
            tau_g = 0.0
        values.append(tau_g)
    assert float(np.mean(values)) >= (1 - EPS) * TAU - 1e-9
