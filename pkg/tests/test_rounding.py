import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splcnsw.core import Allocation, Instance, nsw
from splcnsw.market import scaling_algorithm
from splcnsw.oracle import solve_exact
from splcnsw.rounding import (
    ItemUnit, SpendingGraph, break_cycles, build_spending_graph, market_round, normalize, pack_units, round_forest,
    to_linear_instance, upper_bound,
)

from helpers import desk_suite, splc_hand, two_by_two


def spending_for(inst, p, x):
    base = tuple(xi * pi for xi, pi in zip(x.x, p))
    return base, tuple(np.zeros_like(xi) for xi in x.x)


def test_normalize_divides_by_bang_per_buck():
    inst = Instance.from_nested([[[4.0, 2.0]]])
    assert normalize(inst, [2.0]).u[0].tolist() == [[2.0, 1.0]]


def test_normalize_unit_b_identity():
    inst = two_by_two()
    assert normalize(inst, [1.0, 1.0]) == inst


def test_normalize_rejects_nonpositive():
    with pytest.raises(ValueError):
        normalize(two_by_two(), [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_normalize_preserves_ranking(seed):
    rng = np.random.default_rng(seed)
    inst = Instance(3, 2, (2, 2), tuple(np.sort(rng.uniform(0.1, 5, (3, 2)), axis=1)[:, ::-1] for _ in range(2)))
    b = rng.uniform(0.1, 10, 3)
    xs = [Allocation(tuple(rng.random((3, 2)) * 2 / 3 for _ in range(2))) for _ in range(2)]
    before = [nsw(inst, x).log_product for x in xs]
    after = [nsw(normalize(inst, b), x).log_product for x in xs]
    assert (before[0] < before[1]) == (after[0] < after[1])


def test_upper_bound_empty():
    assert upper_bound([0.5, 1.0], (1, 1), 2).product == 1


def test_upper_bound_formula():
    assert upper_bound([2.0, 1.0], (1, 1), 2).product == pytest.approx(2)
    b = upper_bound([3.0, 2.0], (2, 1), 3)
    assert b.product == pytest.approx(18) and b.high == (0, 1)
    assert b.geometric_mean == pytest.approx(18 ** (1 / 3))


def test_splc_spending_graph_units():
    inst = splc_hand()
    eq = scaling_algorithm(inst)
    units = build_spending_graph(inst, eq.p, eq.x, eq.spending).units
    assert len(units) == 2
    assert units[0].superior and units[0].spend == pytest.approx(2 / 3, abs=1e-3)
    assert not units[1].superior and units[1].spend == pytest.approx(1 / 3, abs=1e-3)


def test_two_halves_share_one_unit():
    inst = Instance.from_nested([[[1.0]], [[1.0]]])
    p = [0.8]
    x = Allocation.from_nested([[[0.5]], [[0.5]]])
    units = pack_units(inst, p, x, spending_for(inst, p, x), 0)
    assert len(units) == 1
    assert [(a, f) for a, f, _ in units[0].shares] == [(0, 0.5), (1, 0.5)]
    assert [s for _, _, s in units[0].shares] == pytest.approx([0.4, 0.4])


def test_greedy_packing_splits_share():
    inst = Instance.from_nested([[[1.0, 1.0]], [[1.0, 1.0]], [[1.0, 1.0]]])
    p = [0.5]
    x = Allocation.from_nested([[[0.6, 0.0]], [[0.6, 0.0]], [[0.8, 0.0]]])
    units = pack_units(inst, p, x, spending_for(inst, p, x), 0)
    got = [[(a, round(f, 12)) for a, f, _ in u.shares] for u in units]
    assert got == [[(0, 0.6), (1, 0.4)], [(1, 0.2), (2, 0.8)]]


def four_cycle(w=0.5):
    units = [ItemUnit(0, 0, shares=[(0, 0.5, w), (1, 0.5, w)]), ItemUnit(0, 1, shares=[(0, 0.5, w), (1, 0.5, w)])]
    return SpendingGraph(2, units, [1.0])


def test_break_cycles_four_cycle():
    g = four_cycle()
    assert not g.is_forest()
    f = break_cycles(g)
    # the symmetric shift empties both decreasing edges at once; zero-money edges are dropped
    assert f.is_forest() and len(f.weight) == 2
    assert sorted(f.weight.values()) == pytest.approx([1.0, 1.0])
    assert f.agent_totals() == pytest.approx(g.agent_totals())
    assert f.unit_totals() == pytest.approx(g.unit_totals())


def test_break_cycles_forest_identity():
    units = [ItemUnit(0, 0, shares=[(0, 1.0, 0.5)]), ItemUnit(0, 1, shares=[(0, 0.5, 0.25), (1, 0.5, 0.25)])]
    g = SpendingGraph(2, units, [0.5])
    assert break_cycles(g).weight == g.weight


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 5), st.integers(2, 6))
def test_break_cycles_conserves_totals(seed, n, t):
    rng = np.random.default_rng(seed)
    units = []
    for idx in range(t):
        holders = np.flatnonzero(rng.random(n) < 0.6)
        units.append(ItemUnit(0, idx, shares=[(int(a), 0.1, float(rng.uniform(0.01, 1))) for a in holders]))
    g = SpendingGraph(n, units, [1.0])
    f = break_cycles(g)
    assert f.is_forest()
    assert np.allclose(f.agent_totals(), g.agent_totals(), atol=1e-9)
    assert np.allclose(f.unit_totals(), g.unit_totals(), atol=1e-9)


def test_round_cheap_child_unit_goes_to_agent():
    inst = Instance.from_nested([[[1.0]]])
    g = SpendingGraph(1, [ItemUnit(0, 0, shares=[(0, 1.0, 0.4)])], [0.4])
    res = round_forest(inst, [0.4], g)
    assert res.allocation == Allocation.from_nested([[[1.0]]]) and not res.flagged


def test_round_path_rescues_zero_agent():
    # agent 0 already holds a cheap item worth 0.5; unit U (price 1) sits between the two agents
    inst = Instance.from_nested([[[0.5], [1.0]], [[0.0], [1.0]]])
    units = [ItemUnit(0, 0, shares=[(0, 1.0, 0.5)]), ItemUnit(1, 1, shares=[(0, 0.5, 0.5), (1, 0.5, 0.5)])]
    g = SpendingGraph(2, units, [0.5, 1.0])
    res = round_forest(inst, [0.5, 1.0], g)
    assert res.allocation.counts().tolist() == [[1, 0], [0, 1]]
    assert nsw(inst, res.allocation).product == pytest.approx(0.5)


def test_round_integral_equilibrium_unchanged():
    inst = two_by_two()
    eq = scaling_algorithm(inst)
    res = market_round(inst, eq)
    assert res.allocation.counts().tolist() == [[1, 0], [0, 1]]


def test_splc_round_gives_both_copies():
    inst = splc_hand()
    res = market_round(inst)
    assert res.allocation == Allocation.from_nested([[[1.0, 1.0]]])
    assert nsw(inst, res.allocation).product == 3


def test_splc_linear_reduction():
    inst = splc_hand()
    eq = scaling_algorithm(inst)
    norm = normalize(inst, eq.b)
    lin = to_linear_instance(norm, eq.p, eq.x, eq.spending)
    vals = [float(ui[0, 0]) for ui in lin.instance.u]
    assert vals == pytest.approx([2 / 3, 1 / 3], abs=1e-3)
    assert upper_bound(eq.p, inst.k, 1).product == 1
    assert upper_bound(lin.prices, lin.instance.k, 1).product == 1


def test_linear_input_values_equal_price():
    inst = two_by_two()
    eq = scaling_algorithm(inst)
    lin = to_linear_instance(normalize(inst, eq.b), eq.p, eq.x, eq.spending)
    for ui, pu in zip(lin.instance.u, lin.prices):
        assert ui[ui > 0] == pytest.approx(pu)


@pytest.mark.parametrize("seed, inst", desk_suite(30, oracle_limit=10**5), ids=lambda v: str(v) if isinstance(v, int) else "")
def test_pipeline_guarantees(seed, inst):
    res = market_round(inst)
    eq = res.equilibrium
    eps = eq.eps_eq(inst)
    _, opt = solve_exact(res.normalized)
    got = nsw(res.normalized, res.allocation)
    # upper bound soundness and the rounded-vs-bound guarantee on the normalized instance
    assert opt <= res.bound.product * (1 + eps) ** inst.n
    assert got.geometric_mean >= 0.5 * res.bound.geometric_mean - eps
    # factor 2 against the optimum of the original instance
    _, opt_orig = solve_exact(inst)
    assert nsw(inst, res.allocation).geometric_mean >= 0.5 * opt_orig ** (1 / inst.n) - 1e-3
    lin = to_linear_instance(res.normalized, eq.p, eq.x, eq.spending)
    ub_lin = upper_bound(lin.prices, lin.instance.k, inst.n)
    assert math.isclose(ub_lin.product, res.bound.product, rel_tol=1e-6)
