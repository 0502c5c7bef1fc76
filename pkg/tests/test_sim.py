from __future__ import annotations

import math

import numpy as np
import pytest

from strattree import ConfigError, CovariateSpace, Cut, Leaf, Sample, Split, StratificationTree, assign_sbr, estimate_ate
from strattree.sim import (
    METHODS,
    REFERENCE_ATE,
    collapse_thin,
    draw,
    format_table,
    infeasible_tree,
    make_adhoc_tree,
    mean_kappa1,
    model,
    rows_to_csv,
    run_study,
    summarize,
)


class TestModels:
    def test_model_one_nominal_constants(self):
        dgp = model(1, "nominal")
        x = np.array([[0.5, 0.5]])
        assert dgp.kappa1(x)[0] == pytest.approx(2.5)
        assert dgp.kappa0 == 0.2
        assert dgp.nu1(x)[0] == 1.0 and dgp.nu0 == 5.0

    def test_calibrated_ate(self):
        for m in (1, 2, 3):
            assert model(m).true_ate == pytest.approx(REFERENCE_ATE[m], abs=1e-12)

    def test_mean_kappa_by_quadrature(self):
        from scipy import integrate, stats

        pdf = stats.beta(2, 5).pdf
        tail = integrate.quad(lambda t: t * pdf(t), 0.4, 1)[0]
        assert mean_kappa1(1) == pytest.approx(5 * tail, rel=1e-10)

    def test_dimensions(self):
        assert model(1).d == 2 and model(2).d == 10 and model(3).d == 10
        with pytest.raises(ValueError):
            model(4)

    def test_draw_deterministic(self):
        a, b = draw(model(2), 50, 3), draw(model(2), 50, 3)
        assert np.array_equal(a.y1, b.y1) and np.array_equal(a.x, b.x)
        assert np.all((a.x > 0) & (a.x < 1))

    def test_noise_is_variance(self):
        dgp = model(1)
        po = draw(dgp, 200_000, 0)
        # control outcomes are kappa0 + 5 * eps with var(eps) = 0.1
        assert po.y0.var() == pytest.approx(25 * 0.1, rel=0.02)


class TestFixedTrees:
    def test_adhoc_depth_one(self):
        t = make_adhoc_tree(CovariateSpace.unit_cube(2), 1, 0)
        assert t.root.cut.threshold == 0.5

    def test_adhoc_depth_three(self):
        t = make_adhoc_tree(CovariateSpace.unit_cube(2), 3, 1)
        assert t.n_leaves == 8 and np.all(t.pi == 0.5)

    def test_adhoc_nested_midpoints(self):
        space = CovariateSpace.unit_cube(1)
        t = make_adhoc_tree(space, 2, 0)
        assert t.root.cut.threshold == 0.5
        assert (t.root.left.cut.threshold, t.root.right.cut.threshold) == (0.25, 0.75)

    def test_infeasible_model_one(self):
        t = infeasible_tree(1)
        assert t.root.cut == Cut(1, 0.4)
        assert t.leaves[0].pi == (0.17,)

    def test_infeasible_model_two(self):
        assert infeasible_tree(2).root.cut == Cut(0, 0.49)

    def test_infeasible_model_three(self):
        t = infeasible_tree(3)
        assert {c.dim for c in t.internal_cuts()} == {0, 1, 2}
        assert {c.threshold for c in t.internal_cuts()} == {0.4}
        assert t.pi.min() == 0.39 and t.pi.max() == 0.49

    def test_unknown_model(self):
        with pytest.raises(ValueError):
            infeasible_tree(7)


class TestCollapse:
    def test_single_unit_merged(self):
        space = CovariateSpace.unit_cube(1)
        root = Split(Cut(0, 0.5), Leaf(1), Split(Cut(0, 0.9), Leaf(2), Leaf(3)))
        tree = StratificationTree(root, space, 2)
        x = np.array([0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.95]).reshape(-1, 1)
        s = Sample(np.arange(7.0), np.array([0, 1, 0, 1, 0, 1, 0]), x)
        merged = collapse_thin(tree, s)
        assert merged.n_leaves == 2
        assert estimate_ate(merged, s).n == 7

    def test_untouched_when_fine(self, tree4):
        x = np.random.default_rng(0).random((400, 2))
        plan = assign_sbr(tree4, x, 0)
        s = Sample(np.zeros(400), plan.treatment, x)
        assert collapse_thin(tree4, s) is tree4


class TestStudy:
    def test_smoke_and_baseline(self):
        res = run_study(model(1), ["none", "adhoc", "infeasible"], 200, 800, reps=4, seed=1)
        rows = {r.method: r for r in res.rows}
        assert rows["none"].delta_length == 0 and rows["none"].delta_rmse == 0
        for r in res.rows:
            assert 0 <= r.coverage <= 100 and 0 <= r.power <= 100 and r.reps == 4
            assert all(math.isfinite(v) for v in (r.delta_length, r.delta_rmse, r.coverage_se))

    def test_fitted_methods(self):
        res = run_study(model(1), METHODS, 200, 800, reps=2, seed=2)
        assert [r.method for r in res.rows] == list(METHODS)
        assert len(res.depths["cv_tree"]) == 2

    def test_worker_count_does_not_matter(self):
        args = (model(1), ["adhoc", "strat_tree"], 200, 800)
        a = run_study(*args, reps=3, seed=4, workers=1)
        b = run_study(*args, reps=3, seed=4, workers=2)
        assert a.rows == b.rows

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            run_study(model(1), ["none"], reps=0)
        with pytest.raises(ConfigError):
            run_study(model(1), ["bogus"], reps=1)
        with pytest.raises(ConfigError):
            run_study(model(1), ["fixed"], reps=1)

    def test_outputs(self):
        res = run_study(model(1), ["none", "adhoc"], 100, 400, reps=3, seed=5)
        text = format_table(res.rows, 100, 400)
        assert "Ad-Hoc" in text and "Coverage" in text
        lines = rows_to_csv(res.rows).strip().splitlines()
        assert lines[0].startswith("method,") and len(lines) == 3

    def test_summary_by_hand(self):
        from strattree.sim import RepOutcome

        outcomes = {
            "none": [RepOutcome(1.0, 0.0, 2.0), RepOutcome(3.0, 2.5, 3.5)],
            "adhoc": [RepOutcome(1.5, 1.0, 2.0), RepOutcome(2.0, 1.0, 3.0)],
        }
        rows = {r.method: r for r in summarize(outcomes, 1.2)}
        assert rows["none"].coverage == 50.0
        assert rows["adhoc"].coverage == 100.0
        # lengths 1.5 vs 1.5 on average
        assert rows["adhoc"].delta_length == pytest.approx(0.0, abs=1e-12)
        mse0 = (0.2**2 + 1.8**2) / 2
        mse1 = (0.3**2 + 0.8**2) / 2
        assert rows["adhoc"].delta_rmse == pytest.approx(100 * (math.sqrt(mse1 / mse0) - 1), rel=1e-12)


def test_stratification_does_not_raise_variance():
    """With equal targets, stratifying on a covariate that shifts outcomes lowers the MC variance."""
    dgp = model(1)
    tree = make_adhoc_tree(dgp.space, 2, 3)
    none = StratificationTree.trivial(dgp.space)
    reps, n = 1500, 400
    strat, plain = [], []
    for r in range(reps):
        po = draw(dgp, n, r)
        for t, out in ((tree, strat), (none, plain)):
            wave = po.observe(assign_sbr(t, po.x, r).treatment)
            out.append(estimate_ate(collapse_thin(t, wave), wave).theta_hat)
    strat, plain = np.array(strat), np.array(plain)
    diff = strat**2 - plain**2 - (strat.mean() ** 2 - plain.mean() ** 2)
    # one-sided at 3 sd of the paired difference in variances
    assert strat.var() - plain.var() <= 3 * diff.std(ddof=1) / math.sqrt(reps)
