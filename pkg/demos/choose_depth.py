"""Depth by cross-validation on a small pilot, where deep trees overfit."""

from __future__ import annotations

import numpy as np

from strattree import FitConfig, cv_fit, fit
from strattree.sim import draw, model

dgp = model(3)
po = draw(dgp, 100, seed=5)
pilot = po.observe(np.random.default_rng(5).permutation(np.arange(100) % 2))

config = FitConfig(max_depth=3).replace(population=60, max_iterations=200, seed=5)
tree, report = cv_fit(pilot, 3, config, dgp.space)

for depth, score in sorted(report.criterion.items()):
    print(f"depth {depth}: held-out variance {score:.3f}")
print("chosen depth", report.chosen_depth)
print(tree)

# the full-depth fit always looks better on the data it was fitted to
deep = fit(pilot, config, dgp.space)
print("in-sample objective at depth 3:", round(deep.objective, 3))
