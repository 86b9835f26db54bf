import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splcnsw.core import (
    Allocation, Instance, InvalidInstance, FormatError, agent_utility, canonicalize, check_feasible, generate,
    load_allocation, load_instance, nsw, positive_welfare_possible, save_allocation, save_instance, validate,
)

from helpers import two_by_two


def test_agent_utility_single_term():
    inst = Instance.from_nested([[[5.0]]])
    assert agent_utility(inst, Allocation.from_nested([[[1.0]]]), 0) == 5


def test_agent_utility_sums_both_copies():
    inst = Instance.from_nested([[[2.0, 1.0]]])
    assert agent_utility(inst, Allocation.from_nested([[[1.0, 1.0]]]), 0) == 3


def test_agent_utility_linear_in_fractions():
    inst = Instance.from_nested([[[3.0]], [[4.0]]])
    x = Allocation.from_nested([[[0.0]], [[0.5]]])
    assert agent_utility(inst, x, 1) == 2


def test_agent_utility_index_out_of_range():
    inst = Instance.from_nested([[[5.0]]])
    with pytest.raises(IndexError):
        agent_utility(inst, Allocation.from_nested([[[1.0]]]), 1)


def test_nsw_two_agents_utility_two():
    inst = Instance.from_nested([[[2.0], [0.0]], [[0.0], [2.0]]])
    w = nsw(inst, Allocation.from_nested([[[1.0], [0.0]], [[0.0], [1.0]]]))
    assert w.product == pytest.approx(4)
    assert w.geometric_mean == pytest.approx(2)
    assert w.log_product == pytest.approx(math.log(4))


def test_nsw_zero_utility_annihilates():
    inst = two_by_two()
    w = nsw(inst, Allocation.from_nested([[[1.0], [1.0]], [[0.0], [0.0]]]))
    assert w.product == 0 and w.geometric_mean == 0 and w.log_product == -math.inf


def test_nsw_preferred_items_maximal():
    inst = two_by_two()
    products = []
    for a0 in (0, 1):
        for a1 in (0, 1):
            x = [[[0.0], [0.0]], [[0.0], [0.0]]]
            x[a0][0][0] = 1.0
            x[a1][1][0] = 1.0
            products.append(nsw(inst, Allocation.from_nested(x)).product)
    assert max(products) == pytest.approx(4)
    assert products[1] == pytest.approx(4)  # agent 0 gets type 0, agent 1 gets type 1


def test_canonicalize_shifts_to_prefix():
    inst = Instance.from_nested([[[2.0, 1.0]]])
    x = Allocation.from_nested([[[0.0, 1.0]]])
    y = canonicalize(inst, x)
    assert y == Allocation.from_nested([[[1.0, 0.0]]])
    assert agent_utility(inst, x, 0) == 1 and agent_utility(inst, y, 0) == 2


def test_canonicalize_prefix_unchanged():
    inst = Instance.from_nested([[[2.0, 1.0]], [[3.0, 3.0]]])
    x = Allocation.from_nested([[[1.0, 0.0]], [[0.0, 0.0]]])
    assert canonicalize(inst, x) == x


def test_canonicalize_rejects_fractional():
    inst = Instance.from_nested([[[2.0, 1.0]]])
    with pytest.raises(ValueError):
        canonicalize(inst, Allocation.from_nested([[[0.5, 0.0]]]))


def test_increasing_marginals_rejected():
    with pytest.raises(InvalidInstance, match="nonincreasing marginals"):
        Instance.from_nested([[[1.0, 2.0]]])


@pytest.mark.parametrize("k, u, fragment", [
    ((0,), (np.zeros((1, 0)),), "positive supply"),
    ((1,), (np.array([[-1.0]]),), "nonnegative"),
    ((2,), (np.array([[1.0]]),), "shape"),
])
def test_validate_names_invariant(k, u, fragment):
    with pytest.raises(InvalidInstance, match=fragment):
        Instance(1, 1, k, u)


def test_validate_ok():
    assert validate(two_by_two()) == []


def test_save_load_round_trip(tmp_path):
    inst = generate(3, 3, 2, (1, 3))
    save_instance(inst, tmp_path / "i.json")
    back = load_instance(tmp_path / "i.json")
    assert back == inst
    assert all(np.array_equal(a, b) for a, b in zip(back.u, inst.u))


def test_allocation_round_trip(tmp_path):
    x = Allocation.from_nested([[[0.1, 1 / 3]], [[0.7, 2 / 7]]])
    save_allocation(x, tmp_path / "x.json")
    assert load_allocation(tmp_path / "x.json") == x


def test_malformed_file(tmp_path):
    (tmp_path / "bad.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(FormatError):
        load_instance(tmp_path / "bad.json")
    (tmp_path / "short.json").write_text('{"n": 1, "m": 1, "k": [2], "u": [[[1.0]]]}', encoding="utf-8")
    with pytest.raises(FormatError):
        load_instance(tmp_path / "short.json")


def test_generate_deterministic():
    assert generate(11, 3, 3) == generate(11, 3, 3)
    assert not generate(11, 3, 3) == generate(12, 3, 3)


def test_generate_valid_and_in_range():
    for seed in range(30):
        inst = generate(seed, 3, 3, (1, 3), zero_prob=0.3)
        assert validate(inst) == []
        assert all(1 <= ki <= 3 for ki in inst.k)
        assert all(np.all(ui[:, 0] <= 10) for ui in inst.u)


def test_positive_welfare_possible():
    assert positive_welfare_possible(two_by_two())
    # two agents, one copy in total
    assert not positive_welfare_possible(Instance.from_nested([[[1.0]], [[1.0]]]))
    # both agents only value type 0, which has a single copy
    assert not positive_welfare_possible(Instance.from_nested([[[1.0], [0.0]], [[1.0], [0.0]]]))


def test_check_feasible_supply():
    inst = Instance.from_nested([[[1.0]], [[1.0]]])
    assert check_feasible(inst, Allocation.from_nested([[[0.5]], [[0.5]]])) == []
    assert check_feasible(inst, Allocation.from_nested([[[1.0]], [[0.5]]]))


# -- properties ---------------------------------------------------------------

seeds = st.integers(0, 10**6)
small = st.integers(1, 4)


@settings(max_examples=60, deadline=None)
@given(seeds, small, small)
def test_canonicalize_never_lowers_welfare(seed, n, m):
    inst = generate(seed, n, m, (1, 3))
    rng = np.random.default_rng(seed)
    x = []
    for ki in inst.k:
        xi = np.zeros((n, ki))
        for j in range(ki):
            xi[rng.integers(n), j] = 1.0
        x.append(xi)
    x = Allocation(tuple(x))
    before, after = nsw(inst, x), nsw(inst, canonicalize(inst, x))
    assert after.log_product >= before.log_product - 1e-12
    assert canonicalize(inst, canonicalize(inst, x)) == canonicalize(inst, x)


@settings(max_examples=60, deadline=None)
@given(seeds, small, small, st.floats(0.1, 10.0))
def test_scaling_one_agent_scales_product(seed, n, m, c):
    inst = generate(seed, n, m, (1, 3))
    x = Allocation(tuple(np.full((n, ki), 1.0 / n) for ki in inst.k))
    f = np.ones(n)
    f[0] = c
    base, scaled = nsw(inst, x), nsw(inst.scaled(f), x)
    assert scaled.product == pytest.approx(c * base.product, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(seeds, small, small)
def test_log_and_direct_product_agree(seed, n, m):
    inst = generate(seed, n, m, (1, 3))
    x = Allocation(tuple(np.full((n, ki), 1.0 / n) for ki in inst.k))
    w = nsw(inst, x)
    direct = math.prod(agent_utility(inst, x, a) for a in range(n))
    assert w.product == pytest.approx(direct, rel=1e-9)
    assert w.geometric_mean == pytest.approx(direct ** (1 / n), rel=1e-9)
