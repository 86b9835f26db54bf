"""Walk through the three pipelines on one small instance.

Run with ``python3 notebooks/walkthrough.py``.
"""

import math

from splcnsw.core import generate, nsw, positive_welfare_possible
from splcnsw.market import scaling_algorithm, verify_equilibrium
from splcnsw.oracle import solve_exact
from splcnsw.rounding import market_round
from splcnsw.stable import estimate_expected_welfare, solve_relaxation

inst = generate(7, 3, 3, (1, 3))
assert positive_welfare_possible(inst)
print(f"instance: n={inst.n} m={inst.m} k={inst.k}")

# ground truth by enumeration
x_opt, opt = solve_exact(inst)
print(f"optimum product {opt:.4f}, geometric mean {opt ** (1 / inst.n):.4f}")

# market pipeline: equilibrium, then spending-graph rounding
eq = scaling_algorithm(inst)
print(f"prices {eq.p.round(4)}, bang-per-buck {eq.b.round(4)}")
print("equilibrium violations:", verify_equilibrium(inst, eq.p, eq.x, eq.b, eq.spending, eq.eps_eq(inst)))
res = market_round(inst, eq)
w = nsw(inst, res.allocation)
print(f"market rounding: geometric mean {w.geometric_mean:.4f} (ratio {w.geometric_mean / opt ** (1 / inst.n):.3f})")
print(f"  normalized upper bound on the geometric mean: {res.bound.geometric_mean:.4f}")

# stable-polynomial pipeline: relaxation, then independent sampling
sol = solve_relaxation(inst)
print(f"relaxation bound on the product {math.exp(sol.value):.4f} (optimum {opt:.4f})")
mean, se = estimate_expected_welfare(inst, sol.x, 10**4, seed=0)
print(f"expected rounded product {mean:.4f} +- {se:.4f}; guarantee e^-2n * bound = "
      f"{math.exp(-2 * inst.n + sol.value):.6f}")
