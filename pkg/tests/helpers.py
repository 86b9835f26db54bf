"""Shared instance suites for the tests."""

import numpy as np

from splcnsw.core import Instance, generate, positive_welfare_possible
from splcnsw.oracle import search_space_size


def desk_suite(count: int, *, max_n: int = 4, max_m: int = 4, oracle_limit: int | None = None):
    """Deterministic desk-scale instances (n, m <= 4, k_i <= 3) with positive optimum.

    Odd seeds zero out some (agent, type) pairs so sparse preferences are
    covered too.  Instances where no allocation gives everyone positive
    utility are skipped, as are ones above ``oracle_limit`` when given.
    """
    out = []
    seed = 0
    while len(out) < count:
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, max_n + 1))
        m = int(rng.integers(1, max_m + 1))
        inst = generate(seed, n, m, (1, 3), zero_prob=0.3 if seed % 2 else 0.0)
        seed += 1
        if not positive_welfare_possible(inst):
            continue
        if oracle_limit is not None and search_space_size(inst) > oracle_limit:
            continue
        out.append((seed - 1, inst))
    return out


def splc_hand() -> Instance:
    return Instance.from_nested([[[2.0, 1.0]]])


def two_by_two() -> Instance:
    return Instance.from_nested([[[2.0], [1.0]], [[1.0], [2.0]]])
