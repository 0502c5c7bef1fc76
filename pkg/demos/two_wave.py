"""Two waves end to end: pilot, fitted tree, second-wave assignment, estimate."""

from __future__ import annotations

import numpy as np

from strattree import FitConfig, StratificationTree, assign_sbr, estimate_ate, estimate_pooled, fit
from strattree.sim import draw, model

dgp = model(1)

# pilot wave: half treated at random, no strata
pilot_po = draw(dgp, 500, seed=1)
a = np.random.default_rng(1).permutation(np.arange(500) % 2)
pilot = pilot_po.observe(a)

config = FitConfig(max_depth=2).replace(population=100, max_iterations=300, seed=1)
report = fit(pilot, config, dgp.space)
tree = report.tree
print(tree)
print("pilot objective", round(report.objective, 4), "after", report.generations, "generations")

# second wave randomized within the fitted strata
main_po = draw(dgp, 4500, seed=2)
plan = assign_sbr(tree, main_po.x, seed=2)
print("treated per stratum", plan.counts[:, 1], "of", plan.stratum_sizes)

wave = main_po.observe(plan.treatment)
second = estimate_ate(tree, wave)
print(f"second wave  {second.theta_hat:.4f}  [{second.ci_low:.4f}, {second.ci_high:.4f}]")

# the pilot used no strata, so its estimate comes from the one-leaf tree
first = estimate_ate(StratificationTree.trivial(dgp.space), pilot)
both = estimate_pooled(first, second)
print(f"pooled       {both.theta_hat:.4f}  [{both.ci_low:.4f}, {both.ci_high:.4f}]")
print("true effect ", dgp.true_ate)
