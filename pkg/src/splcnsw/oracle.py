"""Brute-force ground truth for small instances.

Nothing here is clever; these routines enumerate and exist so the
approximation algorithms have something exact to be checked against.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict

import numpy as np

from .core import Allocation, Instance, nsw

DEFAULT_LIMIT = 10**7
_CHUNK = 1 << 16


class SearchSpaceTooLarge(RuntimeError):
    def __init__(self, size, limit):
        self.size, self.limit = size, limit
        super().__init__(f"search space of {size} states exceeds limit {limit}")


def compositions(total: int, parts: int):
    """All vectors of ``parts`` nonnegative ints summing to ``total``, lexicographic."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in compositions(total - first, parts - 1):
            yield (first, *rest)


def search_space_size(inst: Instance) -> int:
    return math.prod(math.comb(ki + inst.n - 1, inst.n - 1) for ki in inst.k)


def solve_exact(inst: Instance, limit: int = DEFAULT_LIMIT):
    """Maximize the product of utilities over all integral allocations.

    Only the number of copies each agent gets matters (marginals are
    nonincreasing, so prefix form is optimal), and since utilities are
    nonnegative it is enough to hand out every copy.  The count vectors of
    each type are enumerated in lexicographic order; the first maximizer
    found wins.

    Returns:
        (allocation, opt_product) with the allocation in prefix form.
    """
    size = search_space_size(inst)
    if size > limit:
        raise SearchSpaceTooLarge(size, limit)

    vectors = []
    gains = []
    for i, ki in enumerate(inst.k):
        vecs = np.array(list(compositions(ki, inst.n)), dtype=int)
        prefix = np.concatenate([np.zeros((inst.n, 1)), np.cumsum(inst.u[i], axis=1)], axis=1)
        vectors.append(vecs)
        gains.append(prefix[np.arange(inst.n)[None, :], vecs])
    shape = tuple(len(v) for v in vectors)

    best_log, best_flat = -math.inf, 0
    for start in range(0, size, _CHUNK):
        flat = np.arange(start, min(size, start + _CHUNK))
        idx = np.unravel_index(flat, shape)
        util = np.zeros((flat.size, inst.n))
        for g, ix in zip(gains, idx):
            util += g[ix]
        with np.errstate(divide="ignore"):
            logs = np.log(util).sum(axis=1)
        pos = int(np.argmax(logs))
        if logs[pos] > best_log:
            best_log, best_flat = float(logs[pos]), int(flat[pos])

    idx = np.unravel_index(best_flat, shape)
    counts = np.stack([vectors[i][idx[i]] for i in range(inst.m)], axis=1)
    x = Allocation.from_counts(inst, counts)
    return x, nsw(inst, x).product


# -- the independent-sampling rounding, enumerated ------------------------------


def _type_support(inst: Instance, x: Allocation, i: int):
    """Outcomes of one draw for type ``i``: [((a, j) or None, probability)]."""
    ki = inst.k[i]
    support = [((a, j), x.x[i][a, j] / ki) for a in range(inst.n) for j in range(ki) if x.x[i][a, j] > 0]
    slack = 1.0 - sum(pr for _, pr in support)
    if slack > 1e-12:
        support.append((None, slack))
    return support


def outcome_space_size(inst: Instance, x: Allocation) -> int:
    return math.prod(len(_type_support(inst, x, i)) ** inst.k[i] for i in range(inst.m))


def _sequences(inst, x, i):
    support = _type_support(inst, x, i)
    for seq in itertools.product(support, repeat=inst.k[i]):
        yield [s for s, _ in seq], math.prod(pr for _, pr in seq)


def exact_expected_welfare(inst: Instance, x: Allocation, limit: int = DEFAULT_LIMIT) -> float:
    """Exact ``E[prod_a u_a]`` of the sample-``k_i``-times rounding.

    Every draw sequence of every type is enumerated; a draw of ``(a, j)``
    hands agent ``a`` one more copy, and utility is the prefix sum of the
    agent's marginals over the copies it ends up with.
    """
    size = outcome_space_size(inst, x)
    if size > limit:
        raise SearchSpaceTooLarge(size, limit)

    prefix = [np.concatenate([np.zeros((inst.n, 1)), np.cumsum(ui, axis=1)], axis=1) for ui in inst.u]
    per_type = []
    for i in range(inst.m):
        dist = defaultdict(float)
        for seq, pr in _sequences(inst, x, i):
            counts = [0] * inst.n
            for s in seq:
                if s is not None:
                    counts[s[0]] += 1
            dist[tuple(counts)] += pr
        per_type.append([(prefix[i][np.arange(inst.n), list(c)], pr) for c, pr in dist.items()])

    expectation = 0.0
    for combo in itertools.product(*per_type):
        util = sum(g for g, _ in combo)
        expectation += math.prod(pr for _, pr in combo) * float(np.prod(util))
    return expectation


def exact_sampled_probability(inst: Instance, x: Allocation, triplets, limit: int = DEFAULT_LIMIT) -> float:
    """Probability that every triplet in ``triplets`` is drawn at least once."""
    size = outcome_space_size(inst, x)
    if size > limit:
        raise SearchSpaceTooLarge(size, limit)
    wanted = defaultdict(set)
    for a, i, j in triplets:
        wanted[i].add((a, j))
    prob = 1.0
    for i, need in wanted.items():
        hit = 0.0
        for seq, pr in _sequences(inst, x, i):
            if need.issubset(seq):
                hit += pr
        prob *= hit
    return prob

