"""Asynchronous successive halving over the 768-point architecture grid.

A synthetic objective stands in for training so the whole search runs on a
virtual clock in about a second. The exhaustive answer is known, so we can
see how much budget ASHA spends to find it. The synthetic objective
ignores network geometry, so the winner may be a point that cannot be built.
"""

import numpy as np

from ecgforge import hpo

grid = hpo.enumerate_grid()
print(len(grid), "configurations, rungs", hpo.rung_budgets(5, 2, 40))

objective = hpo.synthetic_objective(grid, 0)
rng = np.random.default_rng([0, 1])
speed = rng.uniform(0.5, 2.0, len(grid))
result = hpo.simulate(objective, len(grid), 2, 5, 40, workers=8, duration=lambda c: speed[c],
                      order=list(rng.permutation(len(grid))))
print("ASHA best:", result.best_trial, " exhaustive best:", result.exhaustive_best)
print(f"budget used {result.budget_used} of {result.exhaustive_budget} epochs "
      f"({100 * result.budget_fraction:.1f}%)")
print("winning config:", grid[result.best_trial])

# with every result arriving at once, ASHA makes the same calls as classic successive halving
table = np.random.default_rng(3).normal(size=(32, 4))
scores = lambda t, r: float(table[t, r])  # noqa: E731
print("synchronous ASHA == successive halving:",
      hpo.synchronous_asha(scores, 32) == hpo.classic_successive_halving(scores, 32))
