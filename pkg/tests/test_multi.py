from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from strattree import (
    CovariateSpace,
    FitConfig,
    Leaf,
    Sample,
    StratificationTree,
    e_optimal_objective,
    empirical_variance,
    empirical_variance_matrix,
    estimate_ate,
    estimate_ate_multi,
    fit,
)
from strattree.multi import EOptimalObjective, VarianceMatrix, optimal_stratum_targets
from strattree.objective import VarianceObjective, neyman_allocation

from conftest import four_leaf_tree, random_pilot, stump
from oracles import multi_by_hand


def three_arm(seed, n=600, d=2):
    rng = np.random.default_rng(seed)
    x = rng.random((n, d))
    a = np.tile([0, 1, 2], n // 3)
    y = x[:, 0] + a * x[:, 1] + (a == 2) * 0.5 + rng.normal(0, 1 + 0.5 * a, n)
    return Sample(y, a, x)


class TestEigen:
    def test_identity(self):
        assert e_optimal_objective(np.eye(2)) == 1.0

    def test_diagonal(self):
        assert e_optimal_objective(np.diag([2.0, 5.0])) == 5.0

    def test_known_eigenvalues(self):
        assert e_optimal_objective(np.array([[2.0, 1.0], [1.0, 2.0]])) == pytest.approx(3.0, abs=1e-15)

    def test_not_symmetric(self):
        with pytest.raises(ValueError):
            e_optimal_objective(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_infeasible(self):
        assert e_optimal_objective(VarianceMatrix(np.full((2, 2), np.inf), False)) == math.inf

    def test_dominates_diagonal(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            b = rng.normal(size=(3, 3))
            m = b @ b.T
            assert e_optimal_objective(m) >= np.max(np.diag(m)) - 1e-12


class TestVarianceMatrix:
    def test_single_treatment_reduces(self, pilot):
        from strattree import optimize_leaf_proportions

        tree = optimize_leaf_proportions(four_leaf_tree(), pilot)
        V = empirical_variance_matrix(tree, pilot)
        assert V.matrix.shape == (1, 1)
        assert V.matrix[0, 0] == pytest.approx(empirical_variance(tree, pilot), rel=1e-12)

    def test_symmetric(self):
        s = three_arm(1)
        tree = four_leaf_tree(pis=[(0.3, 0.4)] * 4)
        V = empirical_variance_matrix(tree, s).matrix
        assert np.array_equal(V, V.T)

    def test_homogeneous_off_diagonal(self):
        # each stratum has arm means 0, 1, 2 but its own spread
        rows = []
        for x, spread in ((0.25, 1.0), (0.75, 3.0)):
            for arm in range(3):
                for sign in (-1, 1, -1, 1):
                    rows.append((arm + sign * spread, arm, x))
        y, a, x = (np.array(c) for c in zip(*rows))
        s = Sample(y, a, x.reshape(-1, 1))
        pis = ((0.3, 0.3), (0.25, 0.35))
        tree = stump(0.5, pi=pis)
        V = empirical_variance_matrix(tree, s).matrix
        expected = 0.5 * 1.0 / 0.4 + 0.5 * 9.0 / 0.4
        assert V[0, 1] == pytest.approx(expected, rel=1e-12)
        assert V[0, 0] == pytest.approx(expected + 0.5 * 1.0 / 0.3 + 0.5 * 9.0 / 0.25, rel=1e-12)

    def test_thin_cell(self):
        s = three_arm(2, 30)
        V = empirical_variance_matrix(four_leaf_tree(pis=[(0.3, 0.3)] * 4), s)
        assert not V.feasible and e_optimal_objective(V) == math.inf


class TestTargets:
    def test_single_treatment_is_neyman(self):
        got = optimal_stratum_targets([0.2], [4.0, 1.0], 0.1)
        assert got[0] == neyman_allocation(1.0, 2.0, 0.1)

    def test_in_box_and_optimal_on_grid(self):
        rng = np.random.default_rng(3)
        nu = 0.1
        for _ in range(10):
            dev = rng.normal(size=2)
            var = rng.uniform(0.1, 5, size=3)
            pi = optimal_stratum_targets(dev, var, nu)
            shares = np.array([1 - pi.sum(), *pi])
            assert np.all(shares >= nu - 1e-12) and np.all(shares <= 1 - nu + 1e-12)

            def value(p1, p2):
                m = np.outer(dev, dev) + var[0] / (1 - p1 - p2)
                m[0, 0] += var[1] / p1
                m[1, 1] += var[2] / p2
                return e_optimal_objective(m)

            best_grid = min(
                value(p1, p2)
                for p1, p2 in itertools.product(np.linspace(nu, 1 - 2 * nu, 161), repeat=2)
                if 1 - p1 - p2 >= nu - 1e-12
            )
            assert value(*pi) <= best_grid + 1e-7

    def test_infeasible_nu(self):
        from strattree import ConfigError

        with pytest.raises(ConfigError):
            optimal_stratum_targets([0.0] * 4, [1.0] * 5, 0.25)


class TestEstimateMulti:
    def test_single_treatment_matches_scalar(self):
        s = random_pilot(4, 400)
        tree = four_leaf_tree()
        m, r = estimate_ate_multi(tree, s), estimate_ate(tree, s)
        assert m.theta[0] == pytest.approx(r.theta_hat, abs=1e-12)
        assert m.V.matrix[0, 0] == pytest.approx(r.v_hat, abs=1e-12)
        assert m.ci[0] == pytest.approx((r.ci_low, r.ci_high), abs=1e-12)

    def test_identical_arms(self):
        rng = np.random.default_rng(5)
        n = 60_000
        x = rng.random((n, 2))
        s = Sample(rng.normal(size=n), np.tile([0, 1, 2], n // 3), x)
        m = estimate_ate_multi(four_leaf_tree(pis=[(0.3, 0.3)] * 4), s)
        assert np.all(np.abs(m.theta) < 4 * m.se)

    def test_three_arm_oracle(self):
        s = three_arm(6, 300)
        tree = four_leaf_tree(pis=[(0.3, 0.3)] * 4)
        m = estimate_ate_multi(tree, s)
        theta, v_h, v_y = multi_by_hand(tree.strata(s.x).tolist(), s.y.tolist(), s.a.tolist(), 2)
        assert m.theta == pytest.approx(np.array(theta), abs=1e-12)
        assert m.v_h == pytest.approx(np.array(v_h), abs=1e-12)
        assert m.v_y == pytest.approx(np.array(v_y), abs=1e-12)

    def test_to_dict(self):
        d = estimate_ate_multi(four_leaf_tree(pis=[(0.3, 0.3)] * 4), three_arm(7)).to_dict()
        assert len(d["theta"]) == 2 and len(d["v"]) == 2


class TestEOptimalSearch:
    def test_single_treatment_objective_matches_scalar(self, pilot):
        eo, vo = EOptimalObjective(pilot), VarianceObjective(pilot)
        for tree in (four_leaf_tree(), stump(0.4, d=2, dim=1), StratificationTree.trivial(CovariateSpace.unit_cube(2))):
            (a, ta), (b, tb) = eo(tree), vo(tree)
            assert a == pytest.approx(b, rel=1e-12)
            assert np.allclose(ta.pi, tb.pi, rtol=0, atol=1e-12)

    def test_fit_three_arms(self):
        s = three_arm(8, 600)
        cfg = FitConfig(max_depth=2).replace(population=20, max_iterations=40, patience=10)
        obj = EOptimalObjective(s, cfg)
        r = fit(s, cfg, CovariateSpace.unit_cube(2), obj)
        assert r.tree.n_treatments == 2
        assert np.isfinite(r.objective)
        shares = 1 - r.tree.pi.sum(axis=1)
        assert np.all(shares >= 0.1 - 1e-9) and np.all(r.tree.pi >= 0.1 - 1e-9)
        assert r.objective == pytest.approx(e_optimal_objective(empirical_variance_matrix(r.tree, s, cfg)), rel=1e-10)
