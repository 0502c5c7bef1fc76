from __future__ import annotations

import math

import numpy as np
import pytest

from strattree import ConfigError, CovariateSpace, FitConfig, Sample, cv_fit, empirical_variance, fit
from strattree.cv import fold_indices

from conftest import random_pilot


def cfg(**kw):
    return FitConfig(**kw).replace(population=20, max_iterations=80, patience=20)


def test_zero_depth_only():
    tree, report = cv_fit(random_pilot(0, 80), 0, cfg())
    assert report.chosen_depth == 0 and tree.depth == 0
    assert list(report.criterion) == [0]


def test_criterion_has_every_depth():
    _, report = cv_fit(random_pilot(1, 160), 2, cfg())
    assert sorted(report.criterion) == [0, 1, 2]
    assert len(report.fold_trees) == 6


def test_criterion_is_fold_average():
    pilot = random_pilot(2, 160)
    config = cfg()
    _, report = cv_fit(pilot, 1, config)
    parts = fold_indices(len(pilot), 2, config.ea.seed)
    for L in (0, 1):
        vals = [empirical_variance(report.fold_trees[L, v], pilot.take(np.sort(parts[v])), config) for v in (0, 1)]
        expected = (vals[0] + vals[1]) / 2 if all(map(math.isfinite, vals)) else math.inf
        assert report.criterion[L] == pytest.approx(expected, rel=1e-14)
        # symmetric in the folds
        assert report.criterion[L] == pytest.approx((vals[1] + vals[0]) / 2, rel=1e-14)


def test_constant_outcomes_tie_goes_to_zero():
    # two covariate values, so every candidate cell is well populated in both folds
    x = np.repeat([0.25, 0.75], 40).reshape(-1, 1)
    a = np.arange(80) % 2
    pilot = Sample(np.ones(80), a, x)
    tree, report = cv_fit(pilot, 2, cfg())
    assert set(report.criterion.values()) == {0.0}
    assert report.chosen_depth == 0 and tree.depth == 0


def test_noise_prefers_shallow():
    chosen = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.random((200, 2))
        a = np.arange(200) % 2
        chosen.append(cv_fit(Sample(rng.normal(size=200), a, x), 2, cfg().replace(seed=seed))[1].chosen_depth)
    assert max(set(chosen), key=chosen.count) == 0


def test_refit_on_full_pilot():
    pilot = random_pilot(4, 200)
    config = cfg()
    tree, report = cv_fit(pilot, 2, config)
    direct = fit(pilot, config.replace(max_depth=report.chosen_depth), CovariateSpace.bounding(pilot.x))
    assert tree == direct.tree
    assert report.final.objective == direct.objective


def test_deterministic():
    pilot = random_pilot(5, 120)
    a = cv_fit(pilot, 1, cfg())[1].to_dict()
    b = cv_fit(pilot, 1, cfg())[1].to_dict()
    assert a == b


def test_folds_split_sizes():
    parts = fold_indices(11, 2, 0)
    assert [len(p) for p in parts] == [6, 5]
    assert sorted(np.concatenate(parts).tolist()) == list(range(11))


def test_missing_arm_in_fold():
    x = np.linspace(0, 1, 6).reshape(-1, 1)
    pilot = Sample(np.arange(6.0), np.array([0, 0, 0, 0, 0, 1]), x)
    with pytest.raises(ConfigError, match="seed|larger"):
        cv_fit(pilot, 1, cfg())


def test_too_small():
    pilot = Sample(np.arange(3.0), np.array([0, 1, 0]), np.linspace(0, 1, 3).reshape(-1, 1))
    with pytest.raises(ConfigError):
        cv_fit(pilot, 1, cfg())
