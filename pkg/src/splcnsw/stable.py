"""Stable-polynomial relaxation and independent-sampling rounding.

Two polynomials carry the analysis.  ``p_x(y) = prod_a sum_i y_i sum_j x_aij u_aij``
pairs the fractional allocation with a variable per item type, and ``q(w)``
is the coefficient of ``t^(K-n)`` in ``prod_i (t + w_i/k_i)^k_i``.  The
relaxation value is

    sup_{x, alpha} inf_{y, z}  log p_x(e^y) + log q(alpha e^z) - <alpha, y> - <alpha, z>

and rounding draws ``k_i`` copies of each type independently, copy ``(a, j)``
with probability ``x_aij / k_i``.

All polynomial values are kept as logarithms.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

from .core import EPS_NUM, Allocation, Instance

Y_BOUND = 50.0  # box on the dual variables; keeps an unbounded inner problem finite


class PolyEval(NamedTuple):
    value: float  # log of the polynomial value, -inf when it vanishes
    grad: np.ndarray  # partial derivatives of ``value`` w.r.t. the variables
    vanishing: tuple = ()  # agents whose linear form is zero (p only)


@lru_cache(maxsize=None)
def _log_binom_row(k: int) -> np.ndarray:
    c = np.arange(k + 1)
    row = gammaln(k + 1) - gammaln(c + 1) - gammaln(k - c + 1)
    row.setflags(write=False)
    return row


def _logsumexp(v: np.ndarray) -> float:
    mx = v.max()
    if mx == -math.inf:
        return -math.inf
    return float(mx + math.log(np.exp(v - mx).sum()))


# -- p_x ---------------------------------------------------------------------


def linear_forms(inst: Instance, x: Allocation) -> np.ndarray:
    """``s[a, i] = sum_j x_aij u_aij``, the coefficient of ``y_i`` in agent a's factor."""
    return np.stack([(ui * xi).sum(axis=1) for ui, xi in zip(inst.u, x.x)], axis=1)


def eval_p(inst: Instance, x: Allocation, y) -> PolyEval:
    """``log p_x(y)`` and its gradient in ``y``.

    A vanishing linear form makes the value ``-inf``; the offending agents are
    listed in ``vanishing``.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("eval_p needs y > 0")
    s = linear_forms(inst, x)
    lin = s @ y
    zero = tuple(int(a) for a in np.flatnonzero(lin <= 0))
    if zero:
        return PolyEval(-math.inf, np.full(inst.m, np.nan), zero)
    return PolyEval(float(np.log(lin).sum()), (s / lin[:, None]).sum(axis=0))


# -- q -----------------------------------------------------------------------


def coeff_q(kappa, k) -> float:
    """Coefficient of ``w^kappa`` in ``q``: ``prod_i k_i^-kappa_i C(k_i, kappa_i)``."""
    kappa, k = np.asarray(kappa, dtype=int), np.asarray(k, dtype=int)
    if np.any(kappa < 0) or np.any(kappa > k):
        return 0.0
    return float(np.prod([math.comb(int(ki), int(c)) / ki**c for c, ki in zip(kappa, k)]))


def _factor_logs(w_i: float, k_i: int, n: int) -> np.ndarray:
    """Log coefficients of ``(w_i/k_i)^c C(k_i, c)`` for ``c = 0..min(k_i, n)``."""
    c = np.arange(min(k_i, n) + 1)
    out = _log_binom_row(k_i)[: c.size].copy()
    if w_i > 0:
        out += c * math.log(w_i / k_i)
    else:
        out[1:] = -math.inf
    return out


def _convolve(a: np.ndarray, b: np.ndarray, n: int) -> np.ndarray:
    """Log-domain product of two polynomials, truncated at degree ``n``.

    Each operand is shifted by its largest log coefficient before an ordinary
    convolution, so nothing overflows.
    """
    ma, mb = a.max(), b.max()
    if ma == -math.inf or mb == -math.inf:
        return np.full(min(a.size + b.size - 1, n + 1), -math.inf)
    out = np.convolve(np.exp(a - ma), np.exp(b - mb))[: n + 1]
    with np.errstate(divide="ignore"):
        return np.log(out) + ma + mb


def eval_q(w, k, n: int) -> PolyEval:
    """``log q(w)`` and its gradient, by log-domain convolution.

    Every coefficient is nonnegative for ``w >= 0``, so plain log-sum-exp is
    enough; zero entries of ``w`` are allowed.
    """
    w = np.asarray(w, dtype=float)
    k = [int(c) for c in k]
    m = len(k)
    if n > sum(k):
        raise ValueError(f"q is identically zero: n={n} exceeds K={sum(k)}")
    if np.any(w < 0):
        raise ValueError("eval_q needs w >= 0")
    factors = [_factor_logs(w[i], k[i], n) for i in range(m)]
    prefix = [np.zeros(1)]
    for f in factors:
        prefix.append(_convolve(prefix[-1], f, n))
    suffix = [np.zeros(1)]
    for f in reversed(factors):
        suffix.append(_convolve(suffix[-1], f, n))
    suffix = suffix[::-1]
    total = prefix[m]
    value = float(total[n]) if total.size > n else -math.inf
    grad = np.zeros(m)
    for i in range(m):
        rest = _convolve(prefix[i], suffix[i + 1], n)
        # d/dw_i of C(k,c) (w/k)^c is c C(k,c) w^(c-1) / k^c
        c = np.arange(1, min(k[i], n) + 1)
        idx = n - c
        ok = (idx >= 0) & (idx < rest.size)
        if not np.any(ok):
            continue
        c = c[ok]
        terms = _log_binom_row(k[i])[c] - c * math.log(k[i]) + np.log(c) + rest[n - c]
        if w[i] > 0:
            terms = terms + (c - 1) * math.log(w[i])
        else:
            terms = np.where(c > 1, -math.inf, terms)
        grad[i] = math.exp(_logsumexp(terms) - value) if value > -math.inf else math.nan
    return PolyEval(value, grad)


# -- objective and relaxation --------------------------------------------------------


def objective(inst: Instance, x: Allocation, alpha, y, z) -> float:
    """``log p_x(e^y) + log q(alpha e^z) - <alpha, y> - <alpha, z>``."""
    return _objective(inst, linear_forms(inst, x), np.asarray(alpha, dtype=float), np.asarray(y), np.asarray(z))[0]


def _objective(inst: Instance, s, alpha, y, z):
    """Value and gradients in (y, z, alpha, s)."""
    ey, ez = np.exp(y), np.exp(z)
    lin = s @ ey
    if np.any(lin <= 0):
        return -math.inf, None
    lp = float(np.log(lin).sum())
    gq = eval_q(alpha * ez, inst.k, inst.n)
    if gq.value == -math.inf:
        return -math.inf, None
    val = lp + gq.value - float(alpha @ y) - float(alpha @ z)
    grads = {
        "y": (s * ey[None, :] / lin[:, None]).sum(axis=0) - alpha,
        "z": gq.grad * alpha * ez - alpha,
        "alpha": gq.grad * ez - y - z,
        "s": ey[None, :] / lin[:, None],
    }
    return val, grads


@dataclass
class RelaxationSolution:
    x: Allocation
    alpha: np.ndarray
    value: float
    y: np.ndarray
    z: np.ndarray
    iterations: int
    converged: bool


def _center(v):
    return v - v.mean()


def _inner(inst: Instance, s, alpha, start, tol: float):
    """``inf_{y, z}`` of the objective; ``(y, z)`` centered and boxed."""
    m = inst.m

    def fun(v):
        val, g = _objective(inst, s, alpha, v[:m], v[m:])
        if g is None:
            return math.inf, np.zeros(2 * m)
        return val, np.concatenate([g["y"], g["z"]])

    res = minimize(fun, start, jac=True, method="L-BFGS-B", bounds=[(-Y_BOUND, Y_BOUND)] * (2 * m),
                   options={"gtol": tol, "maxiter": 500})
    v = res.x
    # the objective is invariant under shifting y (or z) when sum(alpha) = n
    v = np.concatenate([_center(v[:m]), _center(v[m:])])
    val, g = _objective(inst, s, alpha, v[:m], v[m:])
    return val, v, g


def project_capped_simplex(v, total: float, cap) -> np.ndarray:
    """Euclidean projection onto ``{0 <= w <= cap, sum w = total}``.

    The projection is ``clip(v - tau, 0, cap)``; the clipped sum is piecewise
    linear in ``tau`` with breakpoints at ``v`` and ``v - cap``, so ``tau`` is
    found exactly by scanning them in order.
    """
    v = np.asarray(v, dtype=float)
    cap = np.broadcast_to(np.asarray(cap, dtype=float), v.shape)
    if total > cap.sum() + EPS_NUM or total < 0:
        raise ValueError("capped simplex is empty")
    v = v - v.max()  # the projection is shift invariant; this keeps huge entries from swamping the rest
    points = np.unique(np.concatenate([v, v - cap]))[::-1]  # tau decreasing: sum increasing
    sums = np.array([np.clip(v - t, 0.0, cap).sum() for t in points])
    k = int(np.searchsorted(sums, total))
    if k == 0:
        return np.clip(v - points[0], 0.0, cap)
    if k >= points.size:
        return cap.copy()
    t0, t1, s0, s1 = points[k - 1], points[k], sums[k - 1], sums[k]
    tau = t0 + (total - s0) * (t1 - t0) / (s1 - s0) if s1 > s0 else t1
    return np.clip(v - tau, 0.0, cap)


def _project_x(inst: Instance, xs):
    return tuple(project_capped_simplex(xi.ravel(), inst.k[i], 1.0).reshape(xi.shape) for i, xi in enumerate(xs))


def _start_point(inst: Instance):
    """Uniform allocation and alpha proportional to supply."""
    xs = tuple(np.full((inst.n, ki), 1.0 / inst.n) for ki in inst.k)
    alpha = project_capped_simplex(np.asarray(inst.k, dtype=float) * inst.n / inst.K, inst.n, np.asarray(inst.k, float))
    return xs, alpha


class _Outer:
    """The outer function ``g(x, alpha) = inf_{y,z} objective`` with Danskin gradients.

    Warm-starts each inner solve from the previous dual point and remembers
    the best point evaluated.
    """

    def __init__(self, inst: Instance, tol: float):
        self.inst, self.tol = inst, tol
        self.start = np.zeros(2 * inst.m)
        self.best = (-math.inf, None, None, None)
        self.record = True  # off while the evaluated points may be slightly infeasible

    def __call__(self, xs, alpha):
        inst = self.inst
        s = np.stack([(ui * xi).sum(axis=1) for ui, xi in zip(inst.u, xs)], axis=1)
        if np.any(s.sum(axis=1) <= 0) or alpha.sum() <= 0:
            return -math.inf, None, None
        val, dual, g = _inner(inst, s, alpha, self.start, self.tol)
        if g is None or not math.isfinite(val):
            return -math.inf, None, None
        self.start = dual
        if self.record and val > self.best[0]:
            self.best = (val, tuple(x.copy() for x in xs), alpha.copy(), dual.copy())
        gx = tuple(g["s"][:, i : i + 1] * inst.u[i] for i in range(inst.m))
        return val, gx, g["alpha"]


def _slsqp(inst: Instance, outer: _Outer, xs, alpha, optimize_x: bool, tol: float, max_iter: int):
    m, n = inst.m, inst.n
    offs = np.concatenate([[0], np.cumsum([n * ki for ki in inst.k])]) if optimize_x else np.zeros(m + 1, int)
    nx = int(offs[-1])

    def unpack(v):
        if not optimize_x:
            return xs, np.clip(v, 0.0, None)
        return tuple(v[offs[i] : offs[i + 1]].reshape(n, inst.k[i]) for i in range(m)), np.clip(v[nx:], 0.0, None)

    def fun(v):
        val, gx, ga = outer(*unpack(v))
        if gx is None:
            return 1e6, np.zeros_like(v)
        grad = [g.ravel() for g in gx] if optimize_x else []
        return -val, -np.concatenate(grad + [ga])

    v0 = np.concatenate(([xi.ravel() for xi in xs] if optimize_x else []) + [alpha])
    bounds = [(0.0, 1.0)] * nx + [(0.0, float(ki)) for ki in inst.k]
    ones = np.r_[np.zeros(nx), np.ones(m)]
    cons = [{"type": "eq", "fun": lambda v: v[nx:].sum() - n, "jac": lambda v: ones}]
    for i in range(m if optimize_x else 0):
        row = np.zeros(nx + m)
        row[offs[i] : offs[i + 1]] = 1.0
        cons.append({"type": "eq", "fun": lambda v, row=row, i=i: row @ v - inst.k[i], "jac": lambda v, row=row: row})
    outer.record = False
    res = minimize(fun, v0, jac=True, method="SLSQP", bounds=bounds, constraints=cons,
                   options={"maxiter": max_iter, "ftol": tol * 1e-4})
    outer.record = True
    xs, alpha = unpack(res.x)
    cap = np.asarray(inst.k, dtype=float)
    return int(res.nit), (_project_x(inst, xs) if optimize_x else xs), project_capped_simplex(alpha, n, cap)


def _ascent(inst: Instance, outer: _Outer, xs, alpha, optimize_x: bool, max_iter: int, patience: int):
    """Projected supergradient ascent with backtracking; returns (iterations, converged)."""
    cap = np.asarray(inst.k, dtype=float)
    val, gx, ga = outer(xs, alpha)
    if gx is None:
        return 0, False
    step, stall = 1.0, 0
    for it in range(1, max_iter + 1):
        # near a vanishing linear form the gradient blows up; measure the step in sup-norm units
        scale = max([1.0, float(np.abs(ga).max())] + [float(np.abs(g).max()) for g in gx])
        while True:
            h = step / scale
            nxs = _project_x(inst, tuple(x + h * g for x, g in zip(xs, gx))) if optimize_x else xs
            nal = project_capped_simplex(alpha + h * ga, inst.n, cap)
            nval, ngx, nga = outer(nxs, nal)
            if ngx is not None and nval >= val - 1e-12:
                break
            step *= 0.5
            if step < 1e-12:
                return it, True  # no ascent direction left at this resolution
        stall = stall + 1 if nval - val < 1e-6 else 0
        xs, alpha, val, gx, ga = nxs, nal, nval, ngx, nga
        if stall >= patience:
            return it, True
        step *= 2.0
    return max_iter, False


def solve_relaxation(inst: Instance, tol: float = 1e-5, max_iter: int = 500, *, x0: Allocation | None = None,
                     alpha0=None, optimize_x: bool = True, patience: int = 50) -> RelaxationSolution:
    """Approximately solve the sup-inf relaxation.

    The inner infimum over ``(y, z)`` is smooth and convex and is solved by
    L-BFGS.  The outer supremum over ``(x, alpha)`` is concave with Danskin's
    gradient at the inner optimum.  SLSQP on the supply and simplex
    constraints gets close quickly.  Projected ascent then polishes from the
    best point so far; it stops after ``patience`` steps that each gain less
    than 1e-6.  The best point evaluated is returned.  With
    ``optimize_x=False`` only ``alpha`` moves and ``x`` stays at ``x0``.
    """
    if inst.n > inst.K:
        raise ValueError(f"relaxation needs n <= K, got n={inst.n}, K={inst.K}")
    xs, alpha = _start_point(inst)
    if x0 is not None:
        xs = tuple(np.array(xi, dtype=float) for xi in x0.x)
    if alpha0 is not None:
        alpha = np.asarray(alpha0, dtype=float)
    outer = _Outer(inst, tol * 1e-2)
    iters, xs_s, alpha_s = _slsqp(inst, outer, xs, alpha, optimize_x, tol, max_iter)
    outer(xs, alpha)  # the start point is feasible; keep it in case SLSQP wandered off
    xs, alpha = xs_s, alpha_s
    more, converged = _ascent(inst, outer, xs, alpha, optimize_x, max_iter, patience)
    val, bx, ba, dual = outer.best
    if bx is None:
        raise ValueError("relaxation objective is -inf at every evaluated point")
    m = inst.m
    return RelaxationSolution(Allocation(bx), ba, float(val), dual[:m], dual[m:], iters + more, converged)


# -- rounding ---------------------------------------------------------------------


class SampleOutcome(NamedTuple):
    draws: list  # per type, k_i entries: (agent, copy) or None for the slack outcome
    allocation: Allocation


def _type_probs(inst: Instance, x: Allocation, i: int):
    xi = np.asarray(x.x[i], dtype=float)
    probs = xi.ravel() / inst.k[i]
    slack = 1.0 - probs.sum()
    if slack < -EPS_NUM or np.any(probs < -EPS_NUM):
        raise ValueError(f"type {i}: draw probabilities do not form a distribution")
    return np.append(np.clip(probs, 0.0, None), max(slack, 0.0))


def randomized_round(inst: Instance, x: Allocation, seed: int) -> SampleOutcome:
    """Draw ``k_i`` copies of every type, copy ``(a, j)`` with probability ``x_aij / k_i``.

    Each draw hands agent ``a`` one more copy of the type; leftover
    probability mass is a draw that hands out nothing.
    """
    rng = np.random.default_rng(seed)
    counts = np.zeros((inst.n, inst.m), dtype=int)
    draws = []
    for i, ki in enumerate(inst.k):
        probs = _type_probs(inst, x, i)
        picks = rng.choice(probs.size, size=ki, p=probs / probs.sum())
        row = []
        for t in picks:
            if t == probs.size - 1:
                row.append(None)
            else:
                a, j = divmod(int(t), ki)
                row.append((a, j))
                counts[a, i] += 1
        draws.append(row)
    return SampleOutcome(draws, Allocation.from_counts(inst, counts))


def sample_counts(inst: Instance, x: Allocation, trials: int, rng) -> np.ndarray:
    """Copies per agent and type over ``trials`` independent roundings; ``(trials, n, m)``."""
    counts = np.zeros((trials, inst.n, inst.m), dtype=int)
    for i, ki in enumerate(inst.k):
        probs = _type_probs(inst, x, i)
        picks = rng.choice(probs.size, size=(trials, ki), p=probs / probs.sum())
        agent = np.where(picks == probs.size - 1, inst.n, picks // ki)
        for a in range(inst.n):
            counts[:, a, i] = (agent == a).sum(axis=1)
    return counts


def _products(inst: Instance, counts: np.ndarray) -> np.ndarray:
    util = np.zeros(counts.shape[:2])
    for i in range(inst.m):
        prefix = np.concatenate([np.zeros((inst.n, 1)), np.cumsum(inst.u[i], axis=1)], axis=1)
        util += prefix[np.arange(inst.n)[None, :], counts[:, :, i]]
    return util.prod(axis=1)


def estimate_expected_welfare(inst: Instance, x: Allocation, trials: int, seed: int):
    """Monte-Carlo mean of the rounded Nash product and its standard error."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    prod = _products(inst, sample_counts(inst, x, trials, np.random.default_rng(seed)))
    mean = float(prod.mean())
    se = float(prod.std(ddof=1) / math.sqrt(trials)) if trials > 1 else math.inf
    return mean, se


def best_sample(inst: Instance, x: Allocation, trials: int, seed: int):
    """Mean, standard error and the best allocation over ``trials`` roundings.

    Uses the same draws as :func:`estimate_expected_welfare` for equal seeds.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    counts = sample_counts(inst, x, trials, np.random.default_rng(seed))
    prod = _products(inst, counts)
    t = int(np.argmax(prod))
    se = float(prod.std(ddof=1) / math.sqrt(trials)) if trials > 1 else math.inf
    return float(prod.mean()), se, Allocation.from_counts(inst, counts[t]), float(prod[t])


def sampling_lower_bound(inst: Instance, x: Allocation, S) -> float:
    """Lower bound on the probability that every triplet of ``S`` is drawn."""
    S = {tuple(int(v) for v in t) for t in S}
    if len(S) != inst.n:
        raise ValueError(f"S must hold n={inst.n} distinct triplets, got {len(S)}")
    e = np.zeros(inst.m, dtype=int)
    for a, i, j in S:
        e[i] += 1
    if np.any(e > np.asarray(inst.k)):
        raise ValueError("S has more triplets of some type than its supply")
    val = math.prod(x.x[i][a, j] / inst.k[i] for a, i, j in S)
    for i, ki in enumerate(inst.k):
        val *= math.exp(-e[i]) * math.factorial(ki) / math.factorial(ki - e[i])
    return val
