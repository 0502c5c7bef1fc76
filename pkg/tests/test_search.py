from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest

from strattree import (
    BudgetExceeded,
    ConfigError,
    CovariateSpace,
    FitConfig,
    Leaf,
    Sample,
    StratificationTree,
    canonical_labels,
    empirical_variance,
    exhaustive_search,
    fit,
    generate_population,
    vary,
)
from strattree.search import TreeSearch, count_trees
from strattree.sim import draw, model

from conftest import four_leaf_tree, random_pilot, stump

SMALL = dict(population=30, max_iterations=200, patience=30)


def config(L=2, **kw):
    ea = {**SMALL, **{k: kw.pop(k) for k in list(kw) if k in ("population", "max_iterations", "patience", "seed")}}
    return FitConfig(max_depth=L, **kw).replace(**ea)


class TestPopulation:
    def test_size_and_depth(self, pilot):
        pop = generate_population(pilot, config(population=500), np.random.default_rng(0))
        assert len(pop) == 500
        assert all(t.depth == 1 for t in pop)

    def test_cuts_from_grid(self):
        s = random_pilot(1, 60, 1)
        grid = ((0.2, 0.5, 0.7),)
        pop = generate_population(s, config(split_grid=grid), np.random.default_rng(1), CovariateSpace.unit_cube(1))
        assert {t.root.cut.threshold for t in pop} <= set(grid[0])

    def test_deterministic(self, pilot):
        a = generate_population(pilot, config(), np.random.default_rng(5))
        b = generate_population(pilot, config(), np.random.default_rng(5))
        assert a == b

    def test_targets_are_optimised(self, pilot):
        from strattree import optimize_leaf_proportions

        for t in generate_population(pilot, config(), np.random.default_rng(2))[:5]:
            assert np.allclose(t.pi, optimize_leaf_proportions(t, pilot).pi)

    def test_no_candidates(self):
        s = Sample(np.arange(6.0), np.array([0, 1] * 3), np.full((6, 1), 0.5))
        with pytest.raises(ConfigError):
            generate_population(s, config(), np.random.default_rng(0))


class TestOperators:
    @pytest.fixture
    def search(self, pilot):
        return TreeSearch(pilot, config(L=2), CovariateSpace.unit_cube(2))

    def test_split_on_leaf(self, search):
        rng = np.random.default_rng(0)
        for _ in range(20):
            child = search.split(Leaf(), rng)
            assert canonical_labels(StratificationTree(child, search.space, 2)).depth == 1

    def test_prune_depth_one(self, search):
        assert search.prune(stump(0.4, d=2).root, np.random.default_rng(0)) == Leaf()

    def test_minor_keeps_shape(self, search):
        tree = four_leaf_tree()
        rng = np.random.default_rng(3)
        for _ in range(30):
            child = search.minor(tree.root, rng)
            new = StratificationTree(child, tree.space, 2)  # validates cells
            assert [c.dim for c in new.internal_cuts()] == [c.dim for c in tree.internal_cuts()]
            changed = [a != b for a, b in zip(new.internal_cuts(), tree.internal_cuts())]
            assert sum(changed) <= 1

    def test_vary_respects_budget(self, pilot):
        cfg = config(L=2)
        rng = np.random.default_rng(11)
        pop = generate_population(pilot, cfg, rng)
        tree = pop[0]
        for _ in range(200):
            tree = vary(tree, pilot, cfg, rng, pop)
            assert tree.depth <= 2
            assert canonical_labels(tree) == tree


class TestFit:
    def test_trace_monotone_and_deterministic(self, pilot):
        a = fit(pilot, config(seed=4))
        b = fit(pilot, config(seed=4))
        assert a.to_dict() == b.to_dict()
        assert all(x >= y for x, y in zip(a.trace, a.trace[1:]))
        assert a.trace[-1] == a.objective
        assert a.terminated in ("converged", "max_iterations")

    def test_reported_value_is_tree_value(self, pilot):
        r = fit(pilot, config(seed=1))
        assert r.objective == pytest.approx(empirical_variance(r.tree, pilot), rel=1e-10)
        assert canonical_labels(r.tree) == r.tree

    def test_depth_zero(self, pilot):
        r = fit(pilot, config(L=0))
        assert r.tree.depth == 0
        assert r.objective == pytest.approx(empirical_variance(r.tree, pilot), rel=1e-12)

    def test_all_infinite_warns(self):
        s = random_pilot(2, 6, 1)
        r = fit(s, config(L=1, min_cell_per_arm=5))
        assert r.tree.depth == 0 and r.warning
        assert math.isinf(r.objective)
        assert r.to_dict()["objective"] is None

    def test_noise_outcomes_reach_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.random((120, 1))
        a = np.arange(120) % 2
        s = Sample(rng.normal(size=120), a, x)
        grid = ((0.2, 0.4, 0.6, 0.8),)
        space = CovariateSpace.unit_cube(1)
        cfg = config(L=2, split_grid=grid)
        r = fit(s, cfg, space)
        _, best = exhaustive_search(s, 2, [np.array(grid[0])], cfg, space)
        assert r.objective == pytest.approx(best, abs=1e-9)
        assert r.objective <= empirical_variance(fit(s, cfg.replace(max_depth=0), space).tree, s)

    def test_model_two_splits_on_first_covariate(self):
        dgp = model(2)
        dims = Counter()
        for seed in range(3):
            po = draw(dgp, 500, seed)
            s = po.observe(np.random.default_rng(seed).integers(0, 2, 500))
            r = fit(s, FitConfig(max_depth=3).replace(population=100, max_iterations=300, seed=seed), dgp.space)
            dims.update(c.dim for c in r.tree.internal_cuts())
        assert dims.most_common(1)[0][0] == 0


class TestExhaustive:
    def test_count_one_dimension(self):
        space = CovariateSpace.unit_cube(1)
        assert count_trees(space, [np.array([0.25, 0.5, 0.75])], 1) == 4

    def test_counts_enumeration(self):
        from strattree.search import enumerate_trees

        space = CovariateSpace.unit_cube(2)
        grid = [np.array([0.3, 0.6]), np.array([0.5])]
        assert sum(1 for _ in enumerate_trees(space, grid, 2)) == count_trees(space, grid, 2)

    def test_nested_minima(self, pilot):
        space = CovariateSpace.unit_cube(2)
        grid = [np.array([0.25, 0.5, 0.75])] * 2
        values = [exhaustive_search(pilot, L, grid, space=space)[1] for L in range(3)]
        assert values[0] >= values[1] >= values[2]

    def test_budget(self, pilot):
        with pytest.raises(BudgetExceeded) as err:
            exhaustive_search(pilot, 3, budget=100)
        assert err.value.count > 100

    def test_tie_prefers_smaller_tree(self):
        # outcomes identical across cells: every split ties with no split
        x = np.linspace(0.05, 0.95, 16).reshape(-1, 1)
        y = np.tile([0.0, 1.0, 2.0, 3.0], 4)
        a = np.tile([0, 0, 1, 1], 4)
        tree, _ = exhaustive_search(Sample(y, a, x), 1, [np.array([0.5])], space=CovariateSpace.unit_cube(1))
        assert tree.depth == 0
