"""Integral allocations from a spending-restricted equilibrium.

The fractional equilibrium is cut into unit items, laid out as a bipartite
agent/unit graph weighted by money, reduced to a forest, and rounded tree by
tree.  The prices of the high-price types give an upper bound on the optimal
Nash welfare of the normalized instance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import networkx as nx
import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import EPS_NUM, Allocation, Instance, nsw

SHARE_EPS = 1e-12


@dataclass
class ItemUnit:
    type: int
    index: int
    superior: bool = False
    shares: list = field(default_factory=list)  # (agent, fraction, spend)
    base: float = 0.0

    @property
    def fraction(self) -> float:
        return sum(f for _, f, _ in self.shares)

    @property
    def spend(self) -> float:
        return sum(s for _, _, s in self.shares)


def pack_units(inst: Instance, p, x: Allocation, spending, i: int) -> list[ItemUnit]:
    """Split the allocation of type ``i`` into at most ``k_i`` unit items.

    Each superior triplet becomes its own unit.  The remaining shares are
    packed greedily, agents in index order, into units holding a fraction
    ``min(1, 1/p_i)`` of an item each, splitting an agent's share across a
    unit boundary when it does not fit.  Shares carry the recorded base
    spending, so a unit's base is what was actually paid for it.
    """
    base, extra = spending
    pi = float(p[i])
    xi, bi, qi = x.x[i], base[i], extra[i]
    units = []
    for a in range(inst.n):
        for j in range(inst.k[i]):
            if qi[a, j] > 0:
                unit = ItemUnit(i, len(units), superior=True, shares=[(a, float(xi[a, j]), float(bi[a, j] + qi[a, j]))])
                unit.base = float(bi[a, j])
                units.append(unit)
    room = min(1.0, 1.0 / pi) if pi > 0 else 1.0
    current = None
    for a in range(inst.n):
        plain = [j for j in range(inst.k[i]) if not qi[a, j] > 0]
        share = float(sum(xi[a, j] for j in plain))
        rate = float(sum(bi[a, j] for j in plain)) / share if share > SHARE_EPS else pi
        while share > SHARE_EPS:
            if current is None or current.fraction >= room - SHARE_EPS:
                current = ItemUnit(i, len(units))
                units.append(current)
            take = min(share, room - current.fraction)
            current.shares.append((a, take, take * rate))
            current.base += take * rate
            share -= take
    return units


class SpendingGraph:
    """Bipartite agent/unit graph with money on the edges."""

    def __init__(self, n: int, units: list[ItemUnit], prices):
        self.n = n
        self.units = units
        self.prices = np.asarray(prices, dtype=float)
        self.weight: dict[tuple[int, int], float] = {}
        for u_idx, unit in enumerate(units):
            for a, _, spend in unit.shares:
                self.weight[(a, u_idx)] = self.weight.get((a, u_idx), 0.0) + spend

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(("a", a) for a in range(self.n))
        g.add_nodes_from(("u", t) for t in range(len(self.units)))
        g.add_edges_from((("a", a), ("u", t)) for (a, t) in self.weight)
        return g

    def agent_totals(self) -> np.ndarray:
        out = np.zeros(self.n)
        for (a, _), w in self.weight.items():
            out[a] += w
        return out

    def unit_totals(self) -> np.ndarray:
        out = np.zeros(len(self.units))
        for (_, t), w in self.weight.items():
            out[t] += w
        return out

    def is_forest(self) -> bool:
        return nx.is_forest(self.graph())

    def copy(self) -> "SpendingGraph":
        g = SpendingGraph.__new__(SpendingGraph)
        g.n, g.units, g.prices, g.weight = self.n, self.units, self.prices, dict(self.weight)
        return g


def build_spending_graph(inst: Instance, p, x: Allocation, spending) -> SpendingGraph:
    units = []
    for i in range(inst.m):
        for unit in pack_units(inst, p, x, spending, i):
            unit.index = len(units)
            units.append(unit)
    return SpendingGraph(inst.n, units, p)


def break_cycles(g: SpendingGraph) -> SpendingGraph:
    """Shift money around cycles until the graph is a forest.

    Agent totals and unit totals are unchanged by every shift.
    """
    g = g.copy()
    while True:
        try:
            cycle = nx.find_cycle(g.graph())
        except nx.NetworkXNoCycle:
            return g
        keys = [(a[1], t[1]) if a[0] == "a" else (t[1], a[1]) for a, t in cycle]
        up, down = keys[0::2], keys[1::2]
        step = min(g.weight[e] for e in down)
        for e in up:
            g.weight[e] += step
        for e in down:
            g.weight[e] -= step
        for e in down:
            if g.weight[e] <= SHARE_EPS * max(1.0, step):
                del g.weight[e]


class RoundingResult(NamedTuple):
    allocation: Allocation
    flagged: bool  # some agent ended with zero utility


def _log_gain(base: float, value: float) -> tuple[int, float]:
    if value <= 0:
        return 0, 0.0
    if base <= 0:
        return 1, math.log(value)
    return 0, math.log(base + value) - math.log(base)


def round_forest(inst: Instance, p, forest: SpendingGraph) -> RoundingResult:
    """Round a spending forest to an integral allocation.

    Per tree, the lowest-index agent is the root.  Leaf units and units of
    types priced at most 1/2 go to their parent agent.  Every other unit is
    matched to one adjacent agent (its parent or a child) so that the number
    of agents lifted off zero utility is largest and, among those matchings,
    the sum of log utilities is largest.
    """
    p = np.asarray(p, dtype=float)
    g = forest.graph()
    counts = np.zeros((inst.n, inst.m), dtype=int)
    remaining = []  # (unit index, candidate agents)
    for comp in nx.connected_components(g):
        agents = sorted(v[1] for v in comp if v[0] == "a")
        if not agents:
            continue
        root = ("a", agents[0])
        parent = dict(nx.bfs_predecessors(g.subgraph(comp), root))
        for v in sorted(comp):
            if v[0] != "u":
                continue
            unit = forest.units[v[1]]
            up = parent[v]
            children = [w for w in g.neighbors(v) if w != up]
            if not children or p[unit.type] <= 0.5 + EPS_NUM:
                counts[up[1], unit.type] += 1
            else:
                remaining.append((v[1], sorted([up[1]] + [w[1] for w in children])))

    flagged = False
    if remaining:
        ks = np.asarray(inst.k)
        base_util = np.array(
            [sum(inst.u[i][a, : counts[a, i]].sum() for i in range(inst.m)) for a in range(inst.n)]
        )
        big = 1e4 * (inst.n + 1)
        forbid = -1e12
        w = np.full((len(remaining), inst.n), forbid)
        for r, (t, cands) in enumerate(remaining):
            i = forest.units[t].type
            for a in cands:
                val = inst.u[i][a, counts[a, i]] if counts[a, i] < ks[i] else 0.0
                rescue, gain = _log_gain(base_util[a], val)
                w[r, a] = big * rescue + gain
        rows, cols = linear_sum_assignment(w, maximize=True)
        for r, a in zip(rows, cols):
            counts[a, forest.units[remaining[r][0]].type] += 1
    counts = np.minimum(counts, np.asarray(inst.k)[None, :])
    x = Allocation.from_counts(inst, counts)
    if nsw(inst, x).product <= 0:
        flagged = True
    return RoundingResult(x, flagged)


# -- bound and normalization ---------------------------------------------------------


def normalize(inst: Instance, b) -> Instance:
    """Divide each agent's utilities by its bang-per-buck."""
    b = np.asarray(b, dtype=float)
    if np.any(b <= 0):
        raise ValueError("bang-per-buck values must be positive")
    return inst.scaled(1.0 / b)


class Bound(NamedTuple):
    product: float
    log_product: float
    geometric_mean: float
    high: tuple


def high_price_set(p, eps: float = EPS_NUM) -> tuple:
    return tuple(int(i) for i in np.flatnonzero(np.asarray(p, dtype=float) > 1 + eps))


def upper_bound(p, k, n: int, H=None) -> Bound:
    """``prod_{i in H} p_i^{k_i}`` and its ``n``-th root."""
    p = np.asarray(p, dtype=float)
    if H is None:
        H = high_price_set(p)
    logp = float(sum(k[i] * math.log(p[i]) for i in H))
    return Bound(math.exp(logp), logp, math.exp(logp / n), tuple(H))


# -- linear reduction -----------------------------------------------------------------


@dataclass
class LinearReduction:
    instance: Instance  # one single-copy item type per unit
    prices: np.ndarray  # each unit priced at the common valuation of its holders
    x: Allocation
    units: list
    spending: tuple


def to_linear_instance(inst: Instance, p, x: Allocation, spending) -> LinearReduction:
    """Linear instance with one item per unit of the equilibrium.

    A superior unit is worth ``p_i + q_aij`` to its owner, an active unit is
    worth ``p_i`` to each agent holding a share of it; everything else is 0.
    Meant for a normalized instance (bang-per-buck 1 for everybody).
    """
    p = np.asarray(p, dtype=float)
    units = build_spending_graph(inst, p, x, spending).units
    vals, prices, xs, base, extra = [], [], [], [], []
    for unit in units:
        value = unit.spend if unit.superior else p[unit.type]
        v = np.zeros((inst.n, 1))
        xv = np.zeros((inst.n, 1))
        for a, frac, _ in unit.shares:
            v[a, 0] = value
            xv[a, 0] += frac
        has_share = bool(unit.shares) and unit.fraction > SHARE_EPS
        prices.append(value if has_share else 0.0)
        vals.append(v if has_share else np.zeros((inst.n, 1)))
        xs.append(xv)
        base.append(xv * prices[-1])
        extra.append(np.zeros((inst.n, 1)))
    lin = Instance(inst.n, len(units), tuple([1] * len(units)), tuple(vals))
    return LinearReduction(lin, np.array(prices), Allocation(tuple(xs)), units, (tuple(base), tuple(extra)))


# -- end to end -----------------------------------------------------------------------


@dataclass
class MarketRounding:
    equilibrium: object  # market.Equilibrium
    normalized: Instance
    forest: SpendingGraph
    allocation: Allocation
    flagged: bool
    bound: Bound

    def welfare(self, inst: Instance):
        return nsw(inst, self.allocation)


def market_round(inst: Instance, eq=None, *, phases=None) -> MarketRounding:
    """Equilibrium, normalization, spending forest and rounding in one go."""
    from .market import scaling_algorithm

    if eq is None:
        eq = scaling_algorithm(inst, phases)
    norm = normalize(inst, eq.b)
    graph = build_spending_graph(norm, eq.p, eq.x, eq.spending)
    forest = break_cycles(graph)
    res = round_forest(norm, eq.p, forest)
    return MarketRounding(eq, norm, forest, res.allocation, res.flagged, upper_bound(eq.p, inst.k, inst.n))
