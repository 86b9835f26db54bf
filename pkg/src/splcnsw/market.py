"""Spending-restricted equilibrium of the utility-allocation market.

Every agent has one dollar.  Type ``i`` has a base price ``p[i]`` and agent
``a`` a bang-per-buck ``b[a]``.  A triplet ``(a, i, j)`` is

* superior when ``u_aij / p_i > b_a``: bought whole for ``u_aij / b_a`` dollars,
* active when the two are equal: bought fractionally at ``p_i`` per unit,
* inferior otherwise: not bought.

Active spending is routed through a flow network (source -> agents -> types
-> sink) and prices of the types left saturated by a surplus agent are raised
in proportion to lowering that agent's bang-per-buck, until a structural
event happens.  A scaling parameter ``delta`` bounds how far the base
spending on a type may run past ``k_i * min(1, p_i)``; halving it repeatedly
drives the allocation toward an equilibrium.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import EPS_NUM, Allocation, Instance, positive_welfare_possible

log = logging.getLogger(__name__)

SUPERIOR, ACTIVE, INFERIOR = 1, 0, -1

FLOW_EPS = 1e-13  # smallest residual the augmenting-path search will use
RATIO_RTOL = 1e-9  # relative slack when comparing u/p against b
DELTA_MIN = 2.0**-24
ITERATION_CONSTANT = 64


class MarketError(RuntimeError):
    """Invalid market state or a loop that failed to terminate."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


# -- small pieces ---------------------------------------------------------------


def price_ceiling(p, delta):
    """``p_i(delta)``: next multiple of ``delta`` strictly above ``p_i``."""
    p = np.asarray(p, dtype=float)
    q = p / delta
    r = np.rint(q)
    on_grid = np.abs(q - r) <= 1e-9 * np.maximum(1.0, r)
    return np.where(on_grid, (r + 1) * delta, np.ceil(q) * delta)


def unit_capacity(p, delta):
    """``c(p_i, delta) = min(1, p_i(delta))``."""
    return np.minimum(1.0, price_ceiling(p, delta))


def edge_capacity(p):
    """Most an agent can spend on one active copy, ``min(1, p_i)``: a whole copy."""
    return np.minimum(1.0, np.asarray(p, dtype=float))


def ratio(inst: Instance, p, i: int) -> np.ndarray:
    """``u_aij / p_i`` for one type; +inf for positive utility at zero price."""
    ui = inst.u[i]
    if p[i] > 0:
        return ui / p[i]
    return np.where(ui > 0, np.inf, 0.0)


@dataclass
class Classification:
    classes: list  # per type, int8 array (n, k_i) of SUPERIOR / ACTIVE / INFERIOR
    e: np.ndarray  # money each agent spends on superior triplets
    l: np.ndarray  # superior triplets per type
    active: np.ndarray  # (n, m) count of active copies


def aggregates(inst: Instance, b, classes) -> Classification:
    e = np.zeros(inst.n)
    l = np.zeros(inst.m, dtype=int)
    active = np.zeros((inst.n, inst.m), dtype=int)
    for i, ci in enumerate(classes):
        sup = ci == SUPERIOR
        e += (inst.u[i] * sup).sum(axis=1) / b
        l[i] = int(sup.sum())
        active[:, i] = (ci == ACTIVE).sum(axis=1)
    return Classification(classes, e, l, active)


def classify(inst: Instance, p, b, rtol: float = RATIO_RTOL) -> Classification:
    """Superior / active / inferior label of every triplet at prices ``p``."""
    p = np.asarray(p, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(b <= 0):
        raise MarketError("bang-per-buck values must be positive")
    classes = []
    for i in range(inst.m):
        r = ratio(inst, p, i)
        bb = b[:, None]
        ci = np.full(r.shape, INFERIOR, dtype=np.int8)
        ci[r > bb * (1 + rtol)] = SUPERIOR
        ci[(np.abs(r - bb) <= bb * rtol) & (inst.u[i] > 0)] = ACTIVE
        classes.append(ci)
    cl = aggregates(inst, b, classes)
    if np.any(cl.e > 1 + EPS_NUM):
        a = int(np.argmax(cl.e))
        raise MarketError(f"agent {a} spends {cl.e[a]:.6g} > 1 on superior items")
    return cl


# -- network and max flow ---------------------------------------------------------


@dataclass
class FlowNetwork:
    cap_s: np.ndarray  # (n,) source -> agent
    cap_a: np.ndarray  # (n, m) agent -> type, zero where no active copy
    cap_t: np.ndarray  # (m,) type -> sink
    e: np.ndarray
    l: np.ndarray

    @property
    def n(self):
        return self.cap_s.size

    @property
    def m(self):
        return self.cap_t.size


def build_network(inst: Instance, p, b, delta: float, cl: Classification | None = None) -> FlowNetwork:
    if cl is None:
        cl = classify(inst, p, b)
    c = unit_capacity(p, delta)
    cap_s = 1.0 - cl.e
    cap_t = (np.asarray(inst.k) - cl.l) * c
    cap_a = cl.active * edge_capacity(p)[None, :]
    if np.any(cap_s < -EPS_NUM) or np.any(cap_t < -EPS_NUM):
        raise MarketError("negative capacity in flow network")
    return FlowNetwork(np.maximum(cap_s, 0.0), cap_a, np.maximum(cap_t, 0.0), cl.e, cl.l)


def _augment_path(net: FlowNetwork, flow: np.ndarray, eps: float):
    """Shortest augmenting path as a list of (agent, type, direction) hops."""
    n, m = net.n, net.m
    out_a = flow.sum(axis=1)
    in_t = flow.sum(axis=0)
    # node ids: agents 0..n-1, types n..n+m-1
    parent = {}
    queue = deque()
    for a in range(n):
        if net.cap_s[a] - out_a[a] > eps:
            parent[a] = None
            queue.append(a)
    while queue:
        v = queue.popleft()
        if v < n:
            a = v
            for i in range(m):
                if n + i not in parent and net.cap_a[a, i] - flow[a, i] > eps:
                    parent[n + i] = a
                    if net.cap_t[i] - in_t[i] > eps:
                        return _trace(parent, n + i, n)
                    queue.append(n + i)
        else:
            i = v - n
            for a in range(n):
                if a not in parent and flow[a, i] > eps:
                    parent[a] = v
                    queue.append(a)
    return None


def _trace(parent, end, n):
    path = [end]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    return path[::-1]  # starts at an agent, alternates agent/type, ends at a type


def max_flow(net: FlowNetwork, flow: np.ndarray | None = None, eps: float = FLOW_EPS) -> np.ndarray:
    """Maximum s-t flow, returned as the (n, m) agent -> type flow matrix.

    Augments along shortest residual paths starting from ``flow`` (zero by
    default).  Paths never pass through the sink, so flow on type -> sink
    edges never decreases relative to the starting flow.
    """
    flow = np.zeros_like(net.cap_a) if flow is None else np.array(flow, dtype=float)
    n = net.n
    while True:
        path = _augment_path(net, flow, eps)
        if path is None:
            return flow
        out_a = flow.sum(axis=1)
        in_t = flow.sum(axis=0)
        amount = net.cap_s[path[0]] - out_a[path[0]]
        amount = min(amount, net.cap_t[path[-1] - n] - in_t[path[-1] - n])
        for u, v in zip(path, path[1:]):
            if u < n:
                amount = min(amount, net.cap_a[u, v - n] - flow[u, v - n])
            else:
                amount = min(amount, flow[v, u - n])
        for u, v in zip(path, path[1:]):
            if u < n:
                flow[u, v - n] += amount
            else:
                flow[v, u - n] -= amount


def min_cut_max_t(net: FlowNetwork, flow: np.ndarray, eps: float = EPS_NUM):
    """Agents ``X`` and types ``Y`` on the source side of the min cut closest to s.

    These are exactly the vertices reachable from s in the residual graph,
    which puts as many vertices as possible on the sink side.
    """
    n, m = net.n, net.m
    out_a = flow.sum(axis=1)
    in_t = flow.sum(axis=0)
    X = {a for a in range(n) if net.cap_s[a] - out_a[a] > eps}
    Y = set()
    queue = deque(X)
    while queue:
        a = queue.popleft()
        for i in range(m):
            if i in Y or net.cap_a[a, i] - flow[a, i] <= eps:
                continue
            if net.cap_t[i] - in_t[i] > eps:
                raise MarketError(f"flow is not maximum: type {i} reachable with spare sink capacity")
            Y.add(i)
            for a2 in range(n):
                if a2 not in X and flow[a2, i] > eps:
                    X.add(a2)
                    queue.append(a2)
    return X, Y


def absorb_tied_types(net: FlowNetwork, flow: np.ndarray, X, Y, eps: float = EPS_NUM) -> set:
    """Add to ``Y`` the types bought up by ``X`` alone.

    A type outside ``Y`` whose active edges from ``X`` are all saturated and
    which gets no flow from outside ``X`` would otherwise have those copies
    turned superior.  Raising its price instead keeps them active: the edge
    capacities grow with the price, so the agents of ``X`` keep spending on
    it, and nobody outside ``X`` loses anything.
    """
    Y = set(Y)
    Xs = sorted(X)
    outside = [a for a in range(net.n) if a not in X]
    for i in range(net.m):
        if i in Y or not Xs or net.cap_a[Xs, i].sum() <= eps:
            continue
        if outside and flow[outside, i].sum() > eps:
            continue
        if np.all(net.cap_a[Xs, i] - flow[Xs, i] <= eps):
            Y.add(i)
    return Y


# -- state and events ----------------------------------------------------------------


@dataclass
class MarketState:
    p: np.ndarray
    b: np.ndarray
    classes: list
    flow: np.ndarray
    delta: float

    def copy(self):
        return MarketState(self.p.copy(), self.b.copy(), [c.copy() for c in self.classes], self.flow.copy(), self.delta)


@dataclass
class Event:
    gamma: float
    kind: str  # inferior_activates | superior_activates | capacity_increase | budget_exhausted
    where: tuple


def superior_spend(inst: Instance, state: MarketState) -> np.ndarray:
    return aggregates(inst, state.b, state.classes).e


def next_event(inst: Instance, state: MarketState, X, Y) -> Event:
    """Smallest factor ``gamma > 1`` at which raising ``p[Y]`` by ``gamma`` and
    dividing ``b[X]`` by it changes the structure.

    Expects the active X -> (I \\ Y) triplets to have been relabelled superior
    already (they are saturated by the cut and become superior as soon as
    ``b`` drops).  Besides the three classic events, the growing cost of the
    superior items of agents in X can exhaust their budgets; that is the
    ``budget_exhausted`` event.
    """
    p, b, delta = state.p, state.b, state.delta
    best = Event(math.inf, "", ())
    floor = 1 + EPS_NUM

    def offer(g, kind, where):
        nonlocal best
        if g > floor and g < best.gamma:
            best = Event(g, kind, where)

    Xs, Ys = sorted(X), sorted(Y)
    notY = [i for i in range(inst.m) if i not in Y]
    notX = [a for a in range(inst.n) if a not in X]
    for a in Xs:
        for i in notY:
            if p[i] <= 0:
                continue
            ci, ui = state.classes[i][a], inst.u[i][a]
            for j in np.flatnonzero((ci == INFERIOR) & (ui > 0)):
                offer(b[a] * p[i] / ui[j], "inferior_activates", (a, i, int(j)))
    for i in Ys:
        for a in notX:
            ci, ui = state.classes[i][a], inst.u[i][a]
            for j in np.flatnonzero(ci == SUPERIOR):
                offer(ui[j] / (b[a] * p[i]), "superior_activates", (a, i, int(j)))
        if p[i] < 1 - EPS_NUM:
            nxt = min(1.0, float(price_ceiling(p[i:i + 1], delta)[0]))
            offer(nxt / p[i], "capacity_increase", (i,))
    if Xs:
        spend = superior_spend(inst, state)
        g = budget_limit(inst, state, X, Y, spend, best.gamma)
        if g < best.gamma:
            offer(g, "budget_exhausted", tuple(Xs))
    if not math.isfinite(best.gamma):
        raise MarketError("no price-increase event is possible; the market state is malformed", state)
    return best


def lower_bounds(inst: Instance, p, l) -> np.ndarray:
    """Least active base spending per type in a Delta-allocation, ``(k_i - l_i) min(1, p_i)``."""
    return (np.asarray(inst.k) - np.asarray(l)) * np.minimum(1.0, np.asarray(p, dtype=float))


def budget_limit(inst: Instance, state: MarketState, X, Y, spend, gamma_hi: float) -> float:
    """Largest ``gamma <= gamma_hi`` at which agents in X can still pay for Y.

    Scaling ``b[X]`` down by ``gamma`` makes their superior items cost
    ``gamma`` times more, leaving ``1 - gamma * spend[a]`` for active items,
    while the least active spending a type of Y needs grows with its price.
    Meeting those lower bounds from X alone is a bipartite flow problem; each
    cut gives a linear condition in ``gamma`` and Newton steps on the
    minimum cuts find the largest feasible ``gamma``.
    """
    Xs, Ys = sorted(X), sorted(Y)
    hi = gamma_hi
    for a in Xs:
        if spend[a] > 0:
            hi = min(hi, 1.0 / spend[a])
    if not Ys or not math.isfinite(hi):
        return hi
    cl = aggregates(inst, state.b, state.classes)
    in_x = np.zeros(inst.n, dtype=bool)
    in_x[Xs] = True
    in_y = np.zeros(inst.m, dtype=bool)
    in_y[Ys] = True
    # capacities and lower bounds at gamma are const + gamma * slope; p_i >= 1 stays put
    grows = state.p < 1
    xy = in_x[:, None] & in_y[None, :]
    edge0 = np.where(xy & ~grows[None, :], cl.active, 0.0)
    edge1 = np.where(xy & grows[None, :], cl.active * state.p[None, :], 0.0)
    k_act = np.asarray(inst.k) - cl.l
    alpha = np.where(in_y & ~grows, k_act, 0.0)
    beta = np.where(in_y & grows, k_act * state.p, 0.0)
    gamma = hi
    for _ in range(100):
        need = alpha + gamma * beta
        cap_s = np.where(in_x, np.maximum(0.0, 1.0 - gamma * spend), 0.0)
        net = FlowNetwork(cap_s, edge0 + gamma * edge1, need, cl.e, cl.l)
        flow = max_flow(net)
        if flow.sum() >= need.sum() - 1e-12:
            return gamma
        reach_a, reach_t = _residual_reach(net, flow)
        src = in_x & ~reach_a
        rest = in_y & ~reach_t
        cross = np.ix_(reach_a, ~reach_t)
        const = src.sum() + edge0[cross].sum() - alpha[rest].sum()
        slope = float(spend[src].sum()) + beta[rest].sum() - edge1[cross].sum()
        if slope <= 0:
            return 1.0  # already infeasible; no room to move
        new = const / slope
        if new >= gamma - 1e-15:
            return gamma
        gamma = max(1.0, new)
    return gamma


def _residual_reach(net: FlowNetwork, flow: np.ndarray, eps: float = FLOW_EPS):
    n, m = net.n, net.m
    out_a = flow.sum(axis=1)
    ra = net.cap_s - out_a > eps
    rt = np.zeros(m, dtype=bool)
    changed = True
    while changed:
        changed = False
        for i in range(m):
            if not rt[i] and np.any(ra & (net.cap_a[:, i] - flow[:, i] > eps)):
                rt[i] = changed = True
        for a in range(n):
            if not ra[a] and np.any(rt & (flow[a] > eps)):
                ra[a] = changed = True
    return ra, rt


def _repair_flow(net: FlowNetwork, flow: np.ndarray) -> np.ndarray:
    """Shrink a warm-start flow until it respects the current capacities."""
    flow = np.minimum(np.maximum(flow, 0.0), net.cap_a)
    over_t = flow.sum(axis=0)
    scale_t = np.where(over_t > net.cap_t, net.cap_t / np.maximum(over_t, 1e-300), 1.0)
    flow = flow * scale_t[None, :]
    over_s = flow.sum(axis=1)
    scale_s = np.where(over_s > net.cap_s, net.cap_s / np.maximum(over_s, 1e-300), 1.0)
    return flow * scale_s[:, None]


def _lower_bounded_flow(inst: Instance, state: MarketState, net: FlowNetwork) -> np.ndarray:
    """Maximum flow that first fills every type up to its lower bound.

    Augmenting never lowers a sink edge, so growing the warm start inside a
    network capped at the lower bounds and then in the full network keeps
    every type at or above its bound whenever that is possible at all.
    """
    low = np.minimum(lower_bounds(inst, state.p, net.l), net.cap_t)
    capped = FlowNetwork(net.cap_s, net.cap_a, low, net.e, net.l)
    flow = max_flow(capped, _repair_flow(capped, state.flow))
    return max_flow(net, flow)


def _apply_event(inst: Instance, state: MarketState, X, Y, ev: Event) -> None:
    g = ev.gamma
    Xs, Ys = sorted(X), sorted(Y)
    state.p[Ys] *= g
    state.b[Xs] /= g
    delta = state.delta
    for i in Ys:
        if state.p[i] < 1 + EPS_NUM:
            q = state.p[i] / delta
            if abs(q - round(q)) <= 1e-9 * max(1.0, q):
                state.p[i] = round(q) * delta
    # ties: every triplet that reached equality, not only the reported one
    for a in Xs:
        for i in range(inst.m):
            if i in Y or state.p[i] <= 0:
                continue
            ci = state.classes[i][a]
            hit = (ci == INFERIOR) & (inst.u[i][a] > 0) & (inst.u[i][a] / state.p[i] >= state.b[a] * (1 - RATIO_RTOL))
            ci[hit] = ACTIVE
    for i in Ys:
        for a in range(inst.n):
            if a in X:
                continue
            ci = state.classes[i][a]
            tied = (ci == SUPERIOR) & (inst.u[i][a] / state.p[i] <= state.b[a] * (1 + RATIO_RTOL))
            ci[tied] = ACTIVE
            # the money it spent on the item at the tie stays on the edge as base spending
            state.flow[a, i] += float(inst.u[i][a][tied].sum()) / state.b[a]
            # active triplets of agents outside X on raised types fall to inferior; they carry no flow
            ci[(ci == ACTIVE) & (inst.u[i][a] / state.p[i] < state.b[a] * (1 - RATIO_RTOL))] = INFERIOR


# -- checks ------------------------------------------------------------------------------


def delta_allocation_violations(inst: Instance, state: MarketState, tol: float = 1e-7) -> list[str]:
    """Why ``state`` is not a Delta-allocation (empty list when it is)."""
    out = []
    cl = aggregates(inst, state.b, state.classes)
    p = state.p
    for i in range(inst.m):
        r = ratio(inst, p, i)
        ci = state.classes[i]
        bb = state.b[:, None]
        if np.any((ci == SUPERIOR) & (r < bb * (1 - 1e-7))):
            out.append(f"type {i}: superior label below bang-per-buck")
        if np.any((ci == INFERIOR) & (r > bb * (1 + 1e-7))):
            out.append(f"type {i}: inferior label above bang-per-buck")
        if np.any((ci == ACTIVE) & (np.abs(r - bb) > bb * 1e-7)):
            out.append(f"type {i}: active label off bang-per-buck")
    active = state.flow.sum(axis=0)
    lo = lower_bounds(inst, p, cl.l)
    hi = (np.asarray(inst.k) - cl.l) * unit_capacity(p, state.delta)
    for i in np.flatnonzero(active < lo - tol):
        out.append(f"type {i}: active base spending {active[i]:.9g} below {lo[i]:.9g}")
    for i in np.flatnonzero(active > hi + tol):
        out.append(f"type {i}: active base spending {active[i]:.9g} above {hi[i]:.9g}")
    spent = cl.e + state.flow.sum(axis=1)
    for a in np.flatnonzero(spent > 1 + tol):
        out.append(f"agent {a}: spends {spent[a]:.9g} > 1")
    if np.any(state.flow > cl.active * edge_capacity(p)[None, :] + tol):
        out.append("flow on an agent-type pair exceeds its active capacity")
    return out


# -- the price-increase loop ---------------------------------------------------------------


def iteration_cap(inst: Instance, delta0: float) -> int:
    K = inst.K
    return int(ITERATION_CONSTANT * K * K * (1.0 / delta0) * max(1.0, math.log2(inst.v_max() + 1)))


def surplus(inst: Instance, state: MarketState) -> np.ndarray:
    return 1.0 - superior_spend(inst, state) - state.flow.sum(axis=1)


def price_increase(inst: Instance, state: MarketState, *, max_iter=None, trace=None, monitor=None) -> MarketState:
    """Raise prices until every budget is spent, keeping a Delta-allocation.

    ``state`` is updated in place and returned.  ``trace`` (a list) receives
    one record per event; ``monitor(state)`` is called after every max-flow.
    """
    eps_money = inst.n * EPS_NUM
    if max_iter is None:
        max_iter = iteration_cap(inst, 1.0 / (2 * inst.K))
    for it in range(max_iter):
        cl = aggregates(inst, state.b, state.classes)
        net = build_network(inst, state.p, state.b, state.delta, cl)
        state.flow = _lower_bounded_flow(inst, state, net)
        if monitor is not None:
            monitor(state)
        left = net.cap_s - state.flow.sum(axis=1)
        if left.sum() <= eps_money:
            return state
        X, Y = min_cut_max_t(net, state.flow)
        if not X:
            return state  # leftover below the residual threshold
        Y = absorb_tied_types(net, state.flow, X, Y)
        # saturated X -> (I \ Y) edges: those items are now bought whole
        for a in X:
            for i in range(inst.m):
                if i not in Y and cl.active[a, i]:
                    ci = state.classes[i][a]
                    ci[ci == ACTIVE] = SUPERIOR
                    state.flow[a, i] = 0.0
        ev = next_event(inst, state, X, Y)
        if trace is not None:
            trace.append(
                {
                    "gamma": ev.gamma,
                    "event": ev.kind,
                    "where": list(ev.where),
                    "delta": state.delta,
                    "prices": state.p.tolist(),
                    "surplus": left.tolist(),
                }
            )
        _apply_event(inst, state, X, Y, ev)
    raise MarketError(f"price increase did not finish within {max_iter} iterations", state)


# -- initialization and the scaling driver ---------------------------------------------------


def initial_delta(inst: Instance) -> float:
    """Largest power of two that is at most ``1 / (2K)``."""
    return 2.0 ** math.floor(math.log2(1.0 / (2 * inst.K)))


def initialize(inst: Instance, delta: float) -> MarketState:
    """Prices and bang-per-buck values supporting a Delta-allocation.

    Every agent gets the same bang-per-buck ``M``, large enough that nobody
    spends more than half a dollar at base prices.  Type ``i`` is priced at
    ``theta_i / M`` where ``theta_i`` is its ``k_i``-th largest marginal over
    all agents, so the triplets above the threshold are superior and those at
    it are active.  Types with fewer than ``k_i`` positive marginals stay at
    price zero: their positively valued triplets are bought outright and the
    rest of the supply is left unsold.
    """
    if delta > 1.0 / (2 * inst.K) + 1e-15:
        raise ValueError("initialization needs delta <= 1/(2K)")
    for a in range(inst.n):
        if not any(inst.u[i][a].max() > 0 for i in range(inst.m)):
            raise MarketError(f"agent {a} values no item positively")
    if not positive_welfare_possible(inst):
        raise MarketError("every allocation leaves some agent with nothing it values; no equilibrium spends all budgets")
    M = 2.0 * sum(float(ui.sum()) for ui in inst.u)
    p = np.zeros(inst.m)
    classes = []
    for i, ki in enumerate(inst.k):
        vals = np.sort(inst.u[i].ravel())[::-1]
        theta = vals[ki - 1]
        ci = np.full((inst.n, ki), INFERIOR, dtype=np.int8)
        if theta > 0:
            p[i] = theta / M
            ci[inst.u[i] > theta] = SUPERIOR
            ci[inst.u[i] == theta] = ACTIVE
        else:
            ci[inst.u[i] > 0] = SUPERIOR
        classes.append(ci)
    b = np.full(inst.n, M)
    state = MarketState(p, b, classes, np.zeros((inst.n, inst.m)), delta)
    cl = aggregates(inst, b, classes)
    state.flow = max_flow(build_network(inst, p, b, delta, cl))
    return state


@dataclass
class Equilibrium:
    p: np.ndarray
    b: np.ndarray
    x: Allocation
    base: tuple  # per type (n, k_i) base spending x_aij * p_i
    extra: tuple  # per type (n, k_i) extra utility spending q_aij
    classes: list
    delta: float
    phases: int
    iterations: int = 0
    trace: list = field(default_factory=list)

    @property
    def spending(self):
        return self.base, self.extra

    def eps_eq(self, inst: Instance) -> float:
        return inst.K * self.delta

    def total_spend(self) -> np.ndarray:
        return sum(bi.sum(axis=1) + qi.sum(axis=1) for bi, qi in zip(self.base, self.extra))


def _allocation_from_state(inst: Instance, state: MarketState):
    x, base, extra = [], [], []
    for i in range(inst.m):
        ci = state.classes[i]
        xi = (ci == SUPERIOR).astype(float)
        pi = state.p[i]
        if pi > 0:
            for a in range(inst.n):
                units = state.flow[a, i] / pi
                for j in np.flatnonzero(ci[a] == ACTIVE):
                    take = min(1.0, units)
                    xi[a, j] = take
                    units -= take
        qi = np.where(ci == SUPERIOR, inst.u[i] / state.b[:, None] - pi, 0.0)
        x.append(xi)
        base.append(xi * pi)
        extra.append(qi)
    return Allocation(tuple(x)), tuple(base), tuple(extra)


def default_phases(inst: Instance) -> int:
    """Halvings from the initial delta down to ``DELTA_MIN``, plus the first phase."""
    return int(round(math.log2(initial_delta(inst) / DELTA_MIN))) + 1


def scaling_algorithm(inst: Instance, phases: int | None = None, *, trace=None, monitor=None) -> Equilibrium:
    """Approximate spending-restricted equilibrium by delta-scaling.

    Runs the price-increase loop at ``delta = 2^-r`` for successively halved
    values and returns the last full Delta-allocation.
    """
    delta = initial_delta(inst)
    if phases is None:
        phases = default_phases(inst)
    state = initialize(inst, delta)
    cap = iteration_cap(inst, delta)
    events = [] if trace is None else trace
    for r in range(phases):
        if r:
            state.delta /= 2
        price_increase(inst, state, max_iter=cap, trace=events, monitor=monitor)
        log.debug("phase %d: delta=%g prices=%s", r, state.delta, state.p)
    x, base, extra = _allocation_from_state(inst, state)
    return Equilibrium(
        state.p.copy(), state.b.copy(), x, base, extra, state.classes, state.delta, phases, len(events), events
    )


# -- verification ---------------------------------------------------------------------------


@dataclass
class Violation:
    condition: int  # 1 admissible spending, 2 budget spent, 3 per-item base spending
    index: tuple
    magnitude: float

    def __str__(self):
        return f"condition {self.condition} at {self.index}: {self.magnitude:.3g}"


def verify_equilibrium(inst: Instance, p, x: Allocation, b, spending, eps: float) -> list[Violation]:
    """Check the three spending-restricted equilibrium conditions.

    ``spending`` is ``(base, extra)`` per type.  Condition 3 is checked per
    item, using the unit partition of the spending graph.
    """
    from .rounding import pack_units

    p = np.asarray(p, dtype=float)
    b = np.asarray(b, dtype=float)
    base, extra = spending
    out = []
    for i in range(inst.m):
        r = ratio(inst, p, i)
        xi, bi, qi, ui = x.x[i], base[i], extra[i], inst.u[i]
        for a in range(inst.n):
            for j in range(inst.k[i]):
                rel = (r[a, j] - b[a]) / b[a]
                if abs(bi[a, j] - xi[a, j] * p[i]) > eps:
                    out.append(Violation(1, (a, i, j), abs(bi[a, j] - xi[a, j] * p[i])))
                if rel > eps:  # superior
                    err = max(abs(xi[a, j] - 1), abs(bi[a, j] + qi[a, j] - ui[a, j] / b[a]))
                elif rel < -eps or ui[a, j] == 0:  # inferior
                    err = max(abs(xi[a, j]), abs(qi[a, j]))
                else:  # active, or superior right at the boundary
                    as_active = abs(qi[a, j])
                    as_superior = max(abs(xi[a, j] - 1), abs(bi[a, j] + qi[a, j] - ui[a, j] / b[a]))
                    err = min(as_active, as_superior)
                if err > eps:
                    out.append(Violation(1, (a, i, j), err))
    spent = sum(bi.sum(axis=1) + qi.sum(axis=1) for bi, qi in zip(base, extra))
    for a in range(inst.n):
        if abs(spent[a] - 1) > eps:
            out.append(Violation(2, (a,), float(spent[a] - 1)))
    for i in range(inst.m):
        units = pack_units(inst, p, x, spending, i)
        overflow = sum(unit.base for unit in units[inst.k[i]:])
        if overflow > eps:
            out.append(Violation(3, (i,), float(overflow)))
        target = min(p[i], 1.0)
        for t in range(inst.k[i]):
            got = units[t].base if t < len(units) else 0.0
            if abs(got - target) > eps:
                out.append(Violation(3, (i, t), float(got - target)))
    return out
