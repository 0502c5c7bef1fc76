"""Estimating the average treatment effect after stratified assignment.

Within each stratum the effect is estimated by a difference in means
``beta(k)``; the overall estimate weights these by stratum shares. Its
variance (on the root-n scale) is estimated by ``V = V_H + V_Y`` where

    V_H = sum_k n(k)/n (beta(k) - theta)^2
    V_Y = n sum_k (n(k)/n)^2 (s1(k)^2 / n1(k) + s0(k)^2 / n0(k))

and ``s_a(k)^2`` are divide-by-n variances. ``V_Y`` is the closed form of the
HC0 sandwich for the saturated stratum-by-arm regression. Confidence
intervals use the normal critical value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .core import (
    CovariateSpace,
    Dimension,
    FitConfig,
    Leaf,
    Sample,
    Split,
    StratificationTree,
    StructureError,
    canonical_labels,
    relabel,
)
from .objective import stratum_moments

ESTIMATE_SCHEMA = "strattree/estimate@1"


class EstimationError(ValueError):
    """The data do not support the requested estimator."""


@dataclass(frozen=True)
class StratumRow:
    label: int
    n: int
    n1: int
    beta: float
    var1: float
    var0: float


@dataclass(frozen=True)
class EstimateResult:
    theta_hat: float
    v_hat: float
    v_h: float
    v_y: float
    ci_low: float
    ci_high: float
    n: int
    level: float = 0.95
    strata: tuple[StratumRow, ...] = field(default_factory=tuple)
    method: str = "stratified"

    @property
    def se(self) -> float:
        """Standard error of the point estimate, ``sqrt(v_hat / n)``."""
        return math.sqrt(self.v_hat / self.n)

    def to_dict(self) -> dict:
        return {
            "schema": ESTIMATE_SCHEMA,
            "method": self.method,
            "theta": self.theta_hat,
            "se": self.se,
            "ci": [self.ci_low, self.ci_high],
            "level": self.level,
            "v_hat": self.v_hat,
            "v_h": self.v_h,
            "v_y": self.v_y,
            "n": self.n,
            "strata": [
                {"stratum": r.label, "n": r.n, "n1": r.n1, "beta": r.beta, "var1": r.var1, "var0": r.var0}
                for r in self.strata
            ],
        }

    def table(self) -> str:
        lines = [
            f"{'stratum':>7} {'n':>7} {'n1':>7} {'beta':>10} {'var1':>10} {'var0':>10}",
        ]
        for r in self.strata:
            lines.append(f"{r.label:>7d} {r.n:>7d} {r.n1:>7d} {r.beta:>10.4f} {r.var1:>10.4f} {r.var0:>10.4f}")
        pct = round(100 * self.level, 6)
        lines.append("")
        lines.append(f"theta = {self.theta_hat:.6f}  se = {self.se:.6f}")
        lines.append(f"{pct:g}% CI = [{self.ci_low:.6f}, {self.ci_high:.6f}]")
        lines.append(f"V = {self.v_hat:.6f} (V_H = {self.v_h:.6f}, V_Y = {self.v_y:.6f}), n = {self.n}")
        return "\n".join(lines)


def critical_value(level: float) -> float:
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    return float(norm.ppf(0.5 + level / 2))


def _interval(theta, v, n, level):
    half = critical_value(level) * math.sqrt(v / n)
    return theta - half, theta + half


def _positions(tree: StratificationTree, sample: Sample) -> np.ndarray:
    tree.space.check(sample.x)
    return tree.leaf_index(sample.x)


def _two_arm(sample: Sample):
    if sample.n_arms != 2:
        raise EstimationError("this estimator handles one treatment; see multi.estimate_ate_multi")


def _from_moments(counts, means, variances, labels, level, method="stratified") -> EstimateResult:
    """Stratified estimate from per-stratum moments (rows with ``n(k) = 0`` are ignored)."""
    size = counts.sum(axis=1)
    keep = size > 0
    bad = keep & ((counts[:, 0] == 0) | (counts[:, 1] == 0))
    if bad.any():
        raise EstimationError(
            "strata with an empty treatment arm: " + ", ".join(str(labels[k]) for k in np.flatnonzero(bad))
        )
    n = int(size.sum())
    if n == 0:
        raise EstimationError("no observations")
    counts, means, variances, labels, size = counts[keep], means[keep], variances[keep], np.asarray(labels)[keep], size[keep]
    share = size / n
    beta = means[:, 1] - means[:, 0]
    theta = float(np.sum(share * beta))
    v_h = float(np.sum(share * (beta - theta) ** 2))
    v_y = float(n * np.sum(share**2 * (variances[:, 1] / counts[:, 1] + variances[:, 0] / counts[:, 0])))
    v = v_h + v_y
    lo, hi = _interval(theta, v, n, level)
    rows = tuple(
        StratumRow(int(labels[k]), int(size[k]), int(counts[k, 1]), float(beta[k]), float(variances[k, 1]), float(variances[k, 0]))
        for k in range(len(size))
    )
    return EstimateResult(theta, v, v_h, v_y, lo, hi, n, level, rows, method)


def estimate_ate(tree: StratificationTree, wave2: Sample, level: float = 0.95) -> EstimateResult:
    """Stratified difference-in-means estimate with the ``V_H + V_Y`` variance."""
    _two_arm(wave2)
    tree.space.check(wave2.x)
    mom = stratum_moments(tree, wave2)
    return _from_moments(mom.counts, mom.means, mom.variances, tree.labels, level)


def estimate_ate_sfe(tree: StratificationTree, wave2: Sample, level: float = 0.95, sbr: bool = True) -> EstimateResult:
    """Strata-fixed-effects OLS coefficient on treatment, with the stratified variance estimate.

    Only valid when every stratum has the same target and assignment was by
    stratified block randomization; otherwise the coefficient is not a
    consistent estimate of the average effect and the call is refused.
    """
    _two_arm(wave2)
    pi = tree.pi[:, 0]
    if not np.all(pi == pi[0]):
        raise EstimationError(
            "strata-fixed-effects regression is not consistent for the average effect when "
            f"assignment targets differ across strata (got {sorted(set(pi.tolist()))})"
        )
    if not sbr:
        raise EstimationError("strata-fixed-effects regression requires stratified block randomization")
    base = estimate_ate(tree, wave2, level)
    pos = _positions(tree, wave2)
    K = tree.n_leaves
    size = np.bincount(pos, minlength=K)
    a = wave2.a.astype(float)
    a_bar = np.bincount(pos, weights=a, minlength=K) / np.maximum(size, 1)
    y_bar = np.bincount(pos, weights=wave2.y, minlength=K) / np.maximum(size, 1)
    da = a - a_bar[pos]
    dy = wave2.y - y_bar[pos]
    beta = float(np.dot(da, dy) / np.dot(da, da))
    lo, hi = _interval(beta, base.v_hat, base.n, level)
    return replace(base, theta_hat=beta, ci_low=lo, ci_high=hi, method="strata_fixed_effects")


def estimate_pooled(pilot_result: EstimateResult, wave2_result: EstimateResult, level: float | None = None) -> EstimateResult:
    """Sample-size weighted combination of pilot and second-wave estimates."""
    level = wave2_result.level if level is None else level
    m, n = pilot_result.n if pilot_result is not None else 0, wave2_result.n
    if m == 0:
        return wave2_result
    N = m + n
    lam = m / N
    theta = lam * pilot_result.theta_hat + (1 - lam) * wave2_result.theta_hat
    v_h = lam * pilot_result.v_h + (1 - lam) * wave2_result.v_h
    v_y = lam * pilot_result.v_y + (1 - lam) * wave2_result.v_y
    v = lam * pilot_result.v_hat + (1 - lam) * wave2_result.v_hat
    lo, hi = _interval(theta, v, N, level)
    return EstimateResult(theta, v, v_h, v_y, lo, hi, N, level, wave2_result.strata, "pooled")


# ---------------------------------------------------------------------------
# Subgroups
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubgroupEstimates:
    overall: EstimateResult
    groups: dict[int, EstimateResult]
    members: dict[int, tuple[int, ...]]  # subgroup label -> stratum labels


def _contains(outer, inner) -> bool:
    (olo, ohi), (ilo, ihi) = outer, inner
    return bool(np.all(olo <= ilo) and np.all(ihi <= ohi))


def subgroup_members(tree: StratificationTree, subgroup_tree: StratificationTree) -> dict[int, tuple[int, ...]]:
    """Map each subgroup label to the strata of ``tree`` whose cells lie inside it.

    Raises ``StructureError`` if some stratum straddles a subgroup boundary,
    i.e. ``tree`` does not extend ``subgroup_tree``.
    """
    if tree.space.d != subgroup_tree.space.d:
        raise StructureError("trees live in spaces of different dimension")
    outer = subgroup_tree.cells()
    members: dict[int, list[int]] = {g: [] for g in subgroup_tree.labels}
    for label, cell in zip(tree.labels, tree.cells()):
        hits = [g for g, box in zip(subgroup_tree.labels, outer) if _contains(box, cell)]
        if not hits:
            raise StructureError(f"tree is not an extension of the subgroup tree: {_straddled(subgroup_tree, cell, label)}")
        members[hits[0]].append(label)
    return {g: tuple(v) for g, v in members.items()}


def _straddled(subgroup_tree, cell, label) -> str:
    lo, hi = cell
    node = subgroup_tree.root
    while isinstance(node, Split):
        j, g = node.cut.dim, node.cut.threshold
        if lo[j] < g < hi[j]:
            return f"stratum {label} straddles the subgroup cut x{j + 1} <= {g:.6g}"
        node = node.left if hi[j] <= g else node.right
    return f"stratum {label} is not nested in any subgroup cell"


def estimate_subgroups(
    tree: StratificationTree, subgroup_tree: StratificationTree, wave2: Sample, level: float = 0.95
) -> SubgroupEstimates:
    """Stratified estimates within each subgroup cell, plus the overall estimate."""
    _two_arm(wave2)
    members = subgroup_members(tree, subgroup_tree)
    overall = estimate_ate(tree, wave2, level)
    mom = stratum_moments(tree, wave2)
    labels = np.asarray(tree.labels)
    groups = {}
    for g, ks in members.items():
        idx = np.flatnonzero(np.isin(labels, ks))
        if mom.counts[idx].sum() == 0:
            raise EstimationError(f"subgroup {g} has no observations")
        groups[g] = replace(
            _from_moments(mom.counts[idx], mom.means[idx], mom.variances[idx], labels[idx], level),
            method="subgroup",
        )
    return SubgroupEstimates(overall, groups, members)


def _sub_space(space: CovariateSpace, lo, hi) -> CovariateSpace:
    dims = []
    for dim, a, b in zip(space.dims, lo, hi):
        if dim.kind == "discrete":
            support = tuple(s for s in dim.support if a <= s <= b)
            if support:
                dims.append(Dimension(float(a), float(b), "discrete", support))
                continue
        dims.append(Dimension(float(a), float(b)))
    return CovariateSpace(tuple(dims))


def fit_subgroup_tree(
    pilot: Sample,
    subgroup_tree: StratificationTree,
    config: FitConfig | None = None,
    fitter=None,
) -> StratificationTree:
    """Fit a tree within each subgroup cell and graft the results under ``subgroup_tree``.

    Each cell gets depth budget ``config.max_depth - subgroup_tree.depth``.
    ``fitter(pilot, config, space)`` defaults to ``search.fit``.
    """
    from .search import fit

    config = config or FitConfig()
    fitter = fitter or fit
    budget = config.max_depth - subgroup_tree.depth
    if budget < 0:
        raise StructureError("subgroup tree is deeper than the requested depth")
    space = subgroup_tree.space
    space.check(pilot.x)
    pos = subgroup_tree.leaf_index(pilot.x)
    subtrees = []
    for k, ((lo, hi), g) in enumerate(zip(subgroup_tree.cells(), subgroup_tree.labels)):
        rows = np.flatnonzero(pos == k)
        arms = np.unique(pilot.a[rows])
        if len(arms) < pilot.n_arms:
            raise EstimationError(f"subgroup {g} lacks pilot observations in some treatment arm")
        sub = _sub_space(space, lo, hi)
        subtrees.append(fitter(pilot.take(rows), config.replace(max_depth=budget), sub).tree.root)

    it = iter(subtrees)

    def graft(node):
        if isinstance(node, Leaf):
            return next(it)
        return Split(node.cut, graft(node.left), graft(node.right))

    root = relabel(graft(subgroup_tree.root))[0]
    return canonical_labels(StratificationTree(root, space, config.max_depth))
