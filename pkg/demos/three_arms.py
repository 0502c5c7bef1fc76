"""Two treatments and a control: E-optimal strata and the joint estimate."""

from __future__ import annotations

import numpy as np

from strattree import CovariateSpace, EOptimalObjective, FitConfig, Sample, assign_sbr, estimate_ate_multi, fit

rng = np.random.default_rng(3)
space = CovariateSpace.unit_cube(2)


def outcomes(x, a):
    # arm 2 only helps when x1 is large, and is noisy there
    effect = np.where(a == 1, 1.0, 0.0) + np.where(a == 2, 2.0 * (x[:, 0] > 0.6), 0.0)
    noise = 1 + (a == 2) * 2 * x[:, 0]
    return x[:, 1] + effect + rng.normal(0, 1, len(a)) * noise


x = rng.random((600, 2))
a = rng.permutation(np.arange(600) % 3)
pilot = Sample(outcomes(x, a), a, x)

config = FitConfig(max_depth=2).replace(population=60, max_iterations=200, seed=3)
report = fit(pilot, config, space, objective=EOptimalObjective(pilot, config))
print(report.tree)
print("largest eigenvalue", round(report.objective, 3))

xm = rng.random((3000, 2))
plan = assign_sbr(report.tree, xm, seed=4)
est = estimate_ate_multi(report.tree, Sample(outcomes(xm, plan.treatment), plan.treatment, xm))
for j, (t, (lo, hi)) in enumerate(zip(est.theta, est.ci), start=1):
    print(f"arm {j}: {t:.3f}  [{lo:.3f}, {hi:.3f}]")
