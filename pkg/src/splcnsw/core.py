"""Instances, allocations and Nash social welfare evaluation.

An instance has ``n`` agents and ``m`` item types, type ``i`` having ``k[i]``
identical copies.  Agent utilities are separable over types and concave
within a type, stored as marginal values: ``u[i][a, j]`` is what agent ``a``
gains from its ``(j+1)``-th copy of type ``i``.  Allocations use the same
ragged layout, ``x[i][a, j]`` being the (fractional) amount of triplet
``(a, i, j)`` given out.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

EPS_NUM = 1e-9


class InvalidInstance(ValueError):
    """Raised when an instance or allocation breaks one of its invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True, eq=False)
class Instance:
    n: int
    m: int
    k: tuple[int, ...]
    u: tuple[np.ndarray, ...]

    def __post_init__(self):
        k = tuple(int(c) for c in self.k)
        u = tuple(np.array(ui, dtype=float) for ui in self.u)
        for ui in u:
            ui.setflags(write=False)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "u", u)
        problems = validate(self)
        if problems:
            raise InvalidInstance(problems)

    @classmethod
    def from_nested(cls, u: Sequence[Sequence[Sequence[float]]]) -> "Instance":
        """Build from ``u[a][i][j]`` (agent, type, copy) nesting."""
        n = len(u)
        m = len(u[0]) if n else 0
        k = [len(u[0][i]) for i in range(m)]
        per_type = [np.array([u[a][i] for a in range(n)], dtype=float).reshape(n, k[i]) for i in range(m)]
        return cls(n=n, m=m, k=tuple(k), u=tuple(per_type))

    def to_nested(self) -> list:
        return [[self.u[i][a].tolist() for i in range(self.m)] for a in range(self.n)]

    @property
    def K(self) -> int:
        return sum(self.k)

    def triplets(self):
        """Yield every ``(a, i, j)`` in lexicographic order."""
        for a in range(self.n):
            for i in range(self.m):
                for j in range(self.k[i]):
                    yield a, i, j

    def v_max(self) -> float:
        """Largest ratio between two positive marginal values of the same agent."""
        best = 1.0
        for a in range(self.n):
            vals = np.concatenate([self.u[i][a] for i in range(self.m)])
            vals = vals[vals > 0]
            if vals.size:
                best = max(best, vals.max() / vals.min())
        return best

    def scaled(self, factors: Sequence[float]) -> "Instance":
        """Multiply each agent's utilities by a positive factor."""
        f = np.asarray(factors, dtype=float)
        if np.any(f <= 0):
            raise ValueError("scaling factors must be positive")
        return Instance(self.n, self.m, self.k, tuple(ui * f[:, None] for ui in self.u))

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (self.n, self.m, self.k) == (other.n, other.m, other.k) and all(
            np.array_equal(a, b) for a, b in zip(self.u, other.u)
        )


def validate(inst: Instance) -> list[str]:
    """Return the list of violated instance invariants (empty when valid)."""
    problems = []
    if inst.n < 1:
        problems.append("n >= 1")
    if inst.m < 1:
        problems.append("m >= 1")
    if len(inst.k) != inst.m or len(inst.u) != inst.m:
        problems.append("k and u must have one entry per item type")
        return problems
    for i, (ki, ui) in enumerate(zip(inst.k, inst.u)):
        if ki < 1:
            problems.append(f"positive supply: k[{i}]={ki}")
            continue
        if ui.shape != (inst.n, ki):
            problems.append(f"shape of u for type {i}: expected {(inst.n, ki)}, got {ui.shape}")
            continue
        if not np.all(np.isfinite(ui)):
            problems.append(f"finite utilities: type {i}")
        if np.any(ui < 0):
            problems.append(f"nonnegative utilities: type {i}")
        if ki > 1 and np.any(np.diff(ui, axis=1) > 0):
            a = int(np.argwhere(np.diff(ui, axis=1) > 0)[0, 0])
            problems.append(f"nonincreasing marginals: agent {a}, type {i}")
    return problems


@dataclass(frozen=True, eq=False)
class Allocation:
    x: tuple[np.ndarray, ...]

    def __post_init__(self):
        x = tuple(np.array(xi, dtype=float) for xi in self.x)
        for xi in x:
            xi.setflags(write=False)
        object.__setattr__(self, "x", x)

    @classmethod
    def zeros(cls, inst: Instance) -> "Allocation":
        return cls(tuple(np.zeros((inst.n, ki)) for ki in inst.k))

    @classmethod
    def from_counts(cls, inst: Instance, counts: np.ndarray) -> "Allocation":
        """Prefix-form integral allocation from an ``(n, m)`` copy-count matrix."""
        x = []
        for i, ki in enumerate(inst.k):
            xi = (np.arange(ki)[None, :] < np.asarray(counts)[:, i, None]).astype(float)
            x.append(xi)
        return cls(tuple(x))

    @property
    def integral(self) -> bool:
        return all(np.all((xi == 0) | (xi == 1)) for xi in self.x)

    def counts(self) -> np.ndarray:
        """Copies of each type held by each agent, rounded; shape ``(n, m)``."""
        return np.stack([np.rint(xi.sum(axis=1)) for xi in self.x], axis=1).astype(int)

    def to_nested(self) -> list:
        n = self.x[0].shape[0]
        return [[xi[a].tolist() for xi in self.x] for a in range(n)]

    @classmethod
    def from_nested(cls, x) -> "Allocation":
        n, m = len(x), len(x[0])
        return cls(tuple(np.array([x[a][i] for a in range(n)], dtype=float) for i in range(m)))

    def __eq__(self, other):
        if not isinstance(other, Allocation):
            return NotImplemented
        return len(self.x) == len(other.x) and all(np.array_equal(a, b) for a, b in zip(self.x, other.x))


def check_feasible(inst: Instance, x: Allocation, tol: float = EPS_NUM) -> list[str]:
    problems = []
    if len(x.x) != inst.m:
        return [f"allocation has {len(x.x)} types, instance {inst.m}"]
    for i, xi in enumerate(x.x):
        if xi.shape != (inst.n, inst.k[i]):
            problems.append(f"shape of x for type {i}")
            continue
        if np.any(xi < -tol) or np.any(xi > 1 + tol):
            problems.append(f"x in [0,1]: type {i}")
        if xi.sum() > inst.k[i] + tol:
            problems.append(f"supply: type {i} uses {xi.sum():.6g} > {inst.k[i]}")
    return problems


def agent_utilities(inst: Instance, x: Allocation) -> np.ndarray:
    """Utility of every agent, ``sum_i sum_j x_aij u_aij``."""
    total = np.zeros(inst.n)
    for ui, xi in zip(inst.u, x.x):
        total += (ui * xi).sum(axis=1)
    return total


def agent_utility(inst: Instance, x: Allocation, a: int) -> float:
    if not 0 <= a < inst.n:
        raise IndexError(f"agent index {a} out of range for n={inst.n}")
    return float(sum(float(ui[a] @ xi[a]) for ui, xi in zip(inst.u, x.x)))


class Welfare(NamedTuple):
    log_product: float
    n: int
    product: float
    geometric_mean: float


def welfare_from_utilities(utils: np.ndarray) -> Welfare:
    utils = np.asarray(utils, dtype=float)
    n = utils.size
    if np.any(utils <= 0):
        return Welfare(-math.inf, n, 0.0, 0.0)
    logp = float(np.log(utils).sum())
    with np.errstate(over="ignore", under="ignore"):
        product = float(np.prod(utils))
    if not 0 < product < math.inf:
        product = math.exp(logp) if logp < 709 else math.inf
    return Welfare(logp, n, product, float(np.exp(logp / n)))


def nsw(inst: Instance, x: Allocation) -> Welfare:
    """Nash social welfare of ``x`` as a product, its log, and geometric mean."""
    return welfare_from_utilities(agent_utilities(inst, x))


def positive_welfare_possible(inst: Instance) -> bool:
    """Whether some integral allocation gives every agent positive utility.

    True exactly when the agents can be matched to distinct copies they value
    positively (Hall's condition on the agent/copy graph).
    """
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import maximum_bipartite_matching

    cols = []
    for i, ki in enumerate(inst.k):
        cols.extend([inst.u[i][:, 0] > 0] * ki)
    adj = csr_matrix(np.stack(cols, axis=1).astype(np.int8))
    match = maximum_bipartite_matching(adj, perm_type="column")
    return bool(np.all(match >= 0))


def canonicalize(inst: Instance, x: Allocation) -> Allocation:
    """Move each agent's copies of a type onto the lowest copy indices."""
    if not x.integral:
        raise ValueError("canonicalize requires an integral allocation")
    return Allocation.from_counts(inst, x.counts())


# -- serialization -----------------------------------------------------------


class FormatError(ValueError):
    pass


def instance_to_dict(inst: Instance) -> dict:
    return {"n": inst.n, "m": inst.m, "k": list(inst.k), "u": inst.to_nested()}


def instance_from_dict(doc: dict) -> Instance:
    try:
        n, m, k, u = int(doc["n"]), int(doc["m"]), [int(c) for c in doc["k"]], doc["u"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed instance document: {exc}") from exc
    if len(u) != n or any(len(row) != m for row in u):
        raise FormatError("u must be nested as u[agent][type][copy] with n x m outer shape")
    try:
        per_type = tuple(np.array([u[a][i] for a in range(n)], dtype=float).reshape(n, k[i]) for i in range(m))
    except (ValueError, IndexError) as exc:
        raise FormatError(f"u does not match k: {exc}") from exc
    return Instance(n, m, tuple(k), per_type)


def _dump(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8", newline="\n")


def _read(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_instance(inst: Instance, path) -> None:
    _dump(instance_to_dict(inst), path)


def load_instance(path) -> Instance:
    return instance_from_dict(_read(path))


def save_allocation(x: Allocation, path) -> None:
    _dump({"kind": "allocation", "x": x.to_nested()}, path)


def load_allocation(path) -> Allocation:
    doc = _read(path)
    if "x" not in doc:
        raise FormatError(f"{path}: allocation document needs an 'x' field")
    return Allocation.from_nested(doc["x"])


def save_report(report: dict, path) -> None:
    _dump(report, path)


def load_report(path) -> dict:
    return _read(path)


# -- generation ---------------------------------------------------------------


def generate(
    seed: int,
    n: int,
    m: int,
    k_range: tuple[int, int] = (1, 3),
    top_range: tuple[float, float] = (1.0, 10.0),
    zero_prob: float = 0.0,
) -> Instance:
    """Random instance; the same seed always gives the same instance.

    First marginals are uniform on ``top_range``; each later marginal is a
    uniform fraction of the one before it.  With ``zero_prob`` > 0 an agent
    ignores a type entirely with that probability (every agent keeps at least
    one positively valued type).
    """
    rng = np.random.default_rng(seed)
    k = rng.integers(k_range[0], k_range[1] + 1, size=m)
    u = []
    for ki in k:
        vals = np.empty((n, ki))
        vals[:, 0] = rng.uniform(*top_range, size=n)
        for j in range(1, ki):
            vals[:, j] = vals[:, j - 1] * rng.uniform(0.0, 1.0, size=n)
        u.append(vals)
    if zero_prob > 0:
        mask = rng.random((n, m)) < zero_prob
        for a in range(n):
            if mask[a].all():
                mask[a, rng.integers(m)] = False
            for i in range(m):
                if mask[a, i]:
                    u[i][a] = 0.0
    return Instance(n, m, tuple(int(c) for c in k), tuple(u))
