"""Variance criteria for candidate stratification trees.

The empirical criterion evaluated on pilot data is

    sum_k  m(k)/m * [ (tau_k - tau)^2 + s0(k)^2 / (1 - pi(k)) + s1(k)^2 / pi(k) ]

where ``tau_k`` is the within-stratum difference in means, ``tau`` the pilot
difference in means and ``s_a(k)^2`` plug-in (divide-by-n) variances. Trees
with a stratum holding fewer than ``min_cell_per_arm`` rows of some arm score
``+inf``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import FitConfig, FlatTree, Sample, StratificationTree

DEFAULT_CONFIG = FitConfig()


def neyman_allocation(sigma1: float, sigma0: float, nu: float = 0.1) -> float:
    """Variance-minimising treated share ``sigma1 / (sigma1 + sigma0)``, clipped to ``[nu, 1 - nu]``.

    A stratum where both standard deviations are zero gets 0.5.
    """
    if sigma1 < 0 or sigma0 < 0:
        raise ValueError("standard deviations must be nonnegative")
    if not 0 < nu < 0.5:
        raise ValueError("nu must lie in (0, 0.5)")
    if sigma1 + sigma0 == 0:
        return 0.5
    return float(min(max(sigma1 / (sigma1 + sigma0), nu), 1.0 - nu))


@dataclass(frozen=True, eq=False)
class StratumMoments:
    """Per-stratum, per-arm counts, means and plug-in variances.

    Arrays have shape ``(K, J + 1)``; rows follow the left-to-right leaf order.
    """

    counts: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    @property
    def sizes(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def shares(self) -> np.ndarray:
        return self.sizes / self.sizes.sum()


def stratum_moments(tree: StratificationTree, sample: Sample) -> StratumMoments:
    pos = tree.leaf_index(sample.x)
    n_arms = max(sample.n_arms, tree.n_treatments + 1)
    # two-pass moments for accuracy
    counts = np.zeros((tree.n_leaves, n_arms), dtype=np.int64)
    np.add.at(counts, (pos, sample.a), 1)
    sums = np.zeros(counts.shape)
    np.add.at(sums, (pos, sample.a), sample.y)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    resid = sample.y - means[pos, sample.a]
    sq = np.zeros(counts.shape)
    np.add.at(sq, (pos, sample.a), resid * resid)
    variances = np.where(counts > 0, sq / np.maximum(counts, 1), 0.0)
    return StratumMoments(counts, means, variances)


def difference_in_means(sample: Sample) -> float:
    y, a = sample.y, sample.a
    return float(y[a == 1].mean() - y[a == 0].mean())


def _require_arms(pilot: Sample) -> None:
    if pilot.n_arms < 2 or not np.any(pilot.a == 0) or not np.any(pilot.a == 1):
        raise ValueError("pilot sample must contain both treated and control rows")


def empirical_variance(tree: StratificationTree, pilot: Sample, config: FitConfig | None = None) -> float:
    """Empirical variance criterion of ``tree`` (using its stored targets) on ``pilot``."""
    config = config or DEFAULT_CONFIG
    _require_arms(pilot)
    if tree.n_treatments != 1 or pilot.n_arms != 2:
        raise ValueError("empirical_variance handles two arms; use multi.empirical_variance_matrix")
    mom = stratum_moments(tree, pilot)
    if np.any(mom.counts < config.min_cell_per_arm):
        return float("inf")
    pi = tree.pi[:, 0]
    theta = difference_in_means(pilot)
    tau = mom.means[:, 1] - mom.means[:, 0]
    terms = (tau - theta) ** 2 + mom.variances[:, 0] / (1 - pi) + mom.variances[:, 1] / pi
    return float(np.sum(mom.shares * terms))


def optimize_leaf_proportions(tree: StratificationTree, pilot: Sample, config: FitConfig | None = None) -> StratificationTree:
    """Same partition with each leaf target set to the clipped Neyman allocation."""
    config = config or DEFAULT_CONFIG
    mom = stratum_moments(tree, pilot)
    sd = np.sqrt(mom.variances)
    pis = []
    for k in range(tree.n_leaves):
        if mom.counts[k, 0] == 0 or mom.counts[k, 1] == 0:
            pis.append(0.5)
        else:
            pis.append(neyman_allocation(sd[k, 1], sd[k, 0], config.nu))
    return tree.with_pi(pis)


class VarianceObjective:
    """Pilot-bound evaluator used by the tree search.

    Calling it with a tree returns ``(value, tree_with_neyman_targets)``.
    Results are memoised on the partition structure.
    """

    def __init__(self, pilot: Sample, config: FitConfig | None = None):
        self.config = config or DEFAULT_CONFIG
        _require_arms(pilot)
        if pilot.n_arms != 2:
            raise ValueError("VarianceObjective handles two arms")
        self.pilot = pilot
        self._x = np.ascontiguousarray(pilot.x)
        self._y = np.ascontiguousarray(pilot.y - pilot.y.mean())
        self._a = np.ascontiguousarray(pilot.a)
        self._theta = difference_in_means(pilot)
        self._cache: dict = {}
        self.evaluations = 0

    def evaluate_key(self, key: tuple) -> tuple[float, tuple]:
        """Objective value and Neyman targets (left-to-right) for a structure key."""
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        f = FlatTree.from_key(key)
        pi = np.empty(f.n_leaves)
        value = _kernels.binary_objective(
            self._x, self._y, self._a, f.feature, f.threshold, f.left, f.right,
            f.position, f.n_leaves, pi, True, self.config.nu,
            self.config.min_cell_per_arm, self._theta,
        )
        out = (float(value), tuple((float(p),) for p in pi))
        self._cache[key] = out
        self.evaluations += 1
        return out

    def __call__(self, tree: StratificationTree) -> tuple[float, StratificationTree]:
        value, pis = self.evaluate_key(tree.key)
        if tuple(leaf.pi for leaf in tree.leaves) != pis:
            tree = tree.with_pi(pis)
        return value, tree


def population_variance(tree: StratificationTree, dgp, n_mc: int, seed=None) -> float:
    """Monte Carlo approximation of the asymptotic variance of the stratified estimator.

    ``dgp`` must provide ``draw(n, seed)`` returning potential outcomes (see
    ``sim.draw``).
    """
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    from .sim import draw

    po = draw(dgp, n_mc, seed)
    pos = tree.leaf_index(po.x)
    K = tree.n_leaves
    share = np.bincount(pos, minlength=K) / n_mc
    effect = po.y1 - po.y0
    theta = effect.mean()
    total = 0.0
    pi = tree.pi[:, 0]
    for k in range(K):
        rows = pos == k
        if not rows.any():
            continue
        tau_k = effect[rows].mean()
        v1 = po.y1[rows].var()
        v0 = po.y0[rows].var()
        total += share[k] * ((tau_k - theta) ** 2 + v0 / (1 - pi[k]) + v1 / pi[k])
    return float(total)
