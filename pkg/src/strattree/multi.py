"""Several treatment arms: covariance of the effect vector and E-optimal trees.

With arms ``0..J`` (0 is control) the root-n covariance of the vector of
stratified effect estimates under targets ``pi`` is

    V(T) = sum_k p(k) [ (tau_k - tau)(tau_k - tau)'
                        + s0(k)^2 / pi_0(k) * 1 1' + diag(s_a(k)^2 / pi_a(k)) ]

with ``pi_0 = 1 - sum_a pi_a``. E-optimal designs minimise its largest
eigenvalue. Per-stratum targets have no closed form and are found by
pairwise coordinate descent over the clipped simplex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from . import _kernels
from .core import ConfigError, FitConfig, FlatTree, Sample, StratificationTree
from .estimate import EstimationError, _interval
from .objective import neyman_allocation, stratum_moments

SYMMETRY_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class VarianceMatrix:
    """A ``J x J`` covariance estimate; ``feasible`` is False when a stratum is too thin."""

    matrix: np.ndarray
    feasible: bool = True

    @property
    def J(self) -> int:
        return self.matrix.shape[0]


def _moments_arrays(counts, means, variances, pis, theta, min_cell):
    """Per-stratum matrices (unweighted) and stratum weights; None if a cell is too thin."""
    if np.any(counts < min_cell):
        return None
    size = counts.sum(axis=1)
    share = size / size.sum()
    J = counts.shape[1] - 1
    tau = means[:, 1:] - means[:, :1]
    dev = tau - theta
    pi0 = 1.0 - pis.sum(axis=1)
    mats = np.einsum("ki,kj->kij", dev, dev)
    mats += (variances[:, 0] / pi0)[:, None, None]
    idx = np.arange(J)
    mats[:, idx, idx] += variances[:, 1:] / pis
    return share, mats


def _contrasts(sample: Sample) -> np.ndarray:
    y, a = sample.y, sample.a
    base = y[a == 0].mean()
    return np.array([y[a == j].mean() - base for j in range(1, sample.n_arms)])


def empirical_variance_matrix(tree: StratificationTree, pilot: Sample, config: FitConfig | None = None) -> VarianceMatrix:
    """Plug-in estimate of the covariance matrix above, using the tree's stored targets."""
    config = config or FitConfig()
    J = pilot.n_arms - 1
    if tree.n_treatments != J:
        raise ValueError(f"tree carries targets for {tree.n_treatments} treatments, pilot has {J}")
    mom = stratum_moments(tree, pilot)
    out = _moments_arrays(mom.counts, mom.means, mom.variances, tree.pi, _contrasts(pilot), config.min_cell_per_arm)
    if out is None:
        return VarianceMatrix(np.full((J, J), np.inf), False)
    share, mats = out
    return VarianceMatrix(np.einsum("k,kij->ij", share, mats))


def _as_matrix(V) -> np.ndarray:
    m = V.matrix if isinstance(V, VarianceMatrix) else np.asarray(V, dtype=float)
    m = np.atleast_2d(m)
    if m.shape[0] != m.shape[1]:
        raise ValueError("variance matrix must be square")
    return m


def e_optimal_objective(V) -> float:
    """Largest eigenvalue of a symmetric matrix (``+inf`` for infeasible designs)."""
    if isinstance(V, VarianceMatrix) and not V.feasible:
        return math.inf
    m = _as_matrix(V)
    if not np.all(np.isfinite(m)):
        return math.inf
    if np.max(np.abs(m - m.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(m))):
        raise ValueError("variance matrix is not symmetric")
    return float(np.linalg.eigvalsh(m)[-1])


# ---------------------------------------------------------------------------
# Per-stratum targets
# ---------------------------------------------------------------------------


def optimal_stratum_targets(dev, var, nu: float, criterion=e_optimal_objective, tol: float = 1e-8, max_sweeps: int = 200):
    """Targets ``(pi_1..pi_J)`` minimising ``criterion`` of one stratum's matrix.

    ``dev`` is the stratum's effect deviation vector and ``var`` the per-arm
    variances ``(s0^2, s1^2, ..., sJ^2)``. Every share, control included,
    stays in ``[nu, 1 - nu]``. Coordinate descent moves mass between pairs of
    arms until no sweep changes any share by more than ``tol``.
    """
    dev = np.asarray(dev, dtype=float)
    var = np.asarray(var, dtype=float)
    J = len(dev)
    if (J + 1) * nu > 1:
        raise ConfigError(f"nu = {nu} is infeasible with {J + 1} arms")
    if J == 1:
        return np.array([neyman_allocation(math.sqrt(var[1]), math.sqrt(var[0]), nu)])
    outer = np.outer(dev, dev)
    idx = np.arange(J)

    def value(shares):
        m = outer + var[0] / shares[0]
        m[idx, idx] += var[1:] / shares[1:]
        return criterion(m)

    # start from the unconstrained square-root rule, pushed into the box
    sd = np.sqrt(var)
    shares = sd / sd.sum() if sd.sum() > 0 else np.full(J + 1, 1.0 / (J + 1))
    shares = _project_box_simplex(shares, nu)
    for _ in range(max_sweeps):
        moved = 0.0
        for a in range(J + 1):
            for b in range(a + 1, J + 1):
                total = shares[a] + shares[b]
                lo, hi = max(nu, total - (1 - nu)), min(1 - nu, total - nu)
                if hi - lo <= 0:
                    continue

                def f(t, a=a, b=b, total=total):
                    s = shares.copy()
                    s[a], s[b] = t, total - t
                    return value(s)

                res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": tol / 10})
                t = float(res.x)
                if f(t) < f(shares[a]):
                    moved = max(moved, abs(t - shares[a]))
                    shares[a], shares[b] = t, total - t
        if moved <= tol:
            break
    return shares[1:].copy()


def _project_box_simplex(v, nu):
    """Euclidean projection onto ``{s : sum s = 1, nu <= s <= 1 - nu}`` (bisection on the shift)."""
    lo, hi = np.min(v) - 1.0, np.max(v) + 1.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if np.clip(v - mid, nu, 1 - nu).sum() > 1:
            lo = mid
        else:
            hi = mid
    return np.clip(v - (lo + hi) / 2, nu, 1 - nu)


class EOptimalObjective:
    """Tree objective for the search: largest eigenvalue of the empirical covariance matrix.

    Per-stratum targets are optimised before evaluation. Calling it returns
    ``(value, tree_with_targets)``; it also provides ``evaluate_key``.
    """

    def __init__(self, pilot: Sample, config: FitConfig | None = None, criterion=e_optimal_objective):
        self.config = config or FitConfig()
        if pilot.n_arms < 2:
            raise ValueError("pilot needs a control and at least one treatment arm")
        self.pilot = pilot
        self.J = pilot.n_arms - 1
        if (self.J + 1) * self.config.nu > 1:
            raise ConfigError(f"nu = {self.config.nu} is infeasible with {self.J + 1} arms")
        self.criterion = criterion
        self._x = np.ascontiguousarray(pilot.x)
        self._y = np.ascontiguousarray(pilot.y - pilot.y.mean())
        self._a = np.ascontiguousarray(pilot.a)
        self._theta = _contrasts(pilot)
        self._cache: dict = {}
        self.evaluations = 0

    def evaluate_key(self, key: tuple) -> tuple[float, tuple]:
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        f = FlatTree.from_key(key)
        pos = _kernels.leaf_positions(self._x, f.feature, f.threshold, f.left, f.right, f.position)
        counts, s1, s2 = _kernels.stratum_sums(pos, self._y, self._a, f.n_leaves, self.J + 1)
        nu = self.config.nu
        default = tuple([1.0 / (self.J + 1)] * self.J)
        if np.any(counts < self.config.min_cell_per_arm):
            pis = tuple(default for _ in range(f.n_leaves))
            out = (math.inf, pis)
        else:
            means = s1 / counts
            variances = np.maximum(s2 / counts - means**2, 0.0)
            tau = means[:, 1:] - means[:, :1]
            pis = np.array([
                optimal_stratum_targets(tau[k] - self._theta, variances[k], nu, self.criterion)
                for k in range(f.n_leaves)
            ])
            share, mats = _moments_arrays(counts, means, variances, pis, self._theta, 1)
            value = self.criterion(np.einsum("k,kij->ij", share, mats))
            out = (float(value), tuple(tuple(float(p) for p in row) for row in pis))
        self._cache[key] = out
        self.evaluations += 1
        return out

    def __call__(self, tree: StratificationTree) -> tuple[float, StratificationTree]:
        value, pis = self.evaluate_key(tree.key)
        if tuple(leaf.pi for leaf in tree.leaves) != pis:
            tree = tree.with_pi(pis)
        return value, tree


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MultiEstimate:
    theta: np.ndarray  # effects of arms 1..J against control
    V: VarianceMatrix  # root-n scale
    v_h: np.ndarray
    v_y: np.ndarray
    n: int
    level: float = 0.95

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.V.matrix) / self.n)

    @property
    def ci(self) -> np.ndarray:
        """Marginal intervals, one row ``(low, high)`` per treatment."""
        return np.array([_interval(t, v, self.n, self.level) for t, v in zip(self.theta, np.diag(self.V.matrix))])

    def to_dict(self) -> dict:
        return {
            "schema": "strattree/estimate-multi@1",
            "theta": self.theta.tolist(),
            "se": self.se.tolist(),
            "ci": self.ci.tolist(),
            "level": self.level,
            "v": self.V.matrix.tolist(),
            "v_h": self.v_h.tolist(),
            "v_y": self.v_y.tolist(),
            "n": self.n,
        }


def estimate_ate_multi(tree: StratificationTree, wave2: Sample, level: float = 0.95) -> MultiEstimate:
    """Stratified effect estimates of every arm against control, with their covariance."""
    tree.space.check(wave2.x)
    mom = stratum_moments(tree, wave2)
    counts, means, variances = mom.counts, mom.means, mom.variances
    size = counts.sum(axis=1)
    keep = size > 0
    bad = keep & np.any(counts == 0, axis=1)
    if bad.any():
        labels = np.asarray(tree.labels)
        raise EstimationError("strata with an empty treatment arm: " + ", ".join(map(str, labels[bad])))
    counts, means, variances, size = counts[keep], means[keep], variances[keep], size[keep]
    n = int(size.sum())
    J = counts.shape[1] - 1
    share = size / n
    beta = means[:, 1:] - means[:, :1]
    theta = np.sum(share[:, None] * beta, axis=0)
    dev = beta - theta
    v_h = np.einsum("k,ki,kj->ij", share, dev, dev)
    w = n * share**2
    v_y = np.einsum("k,k->", w, variances[:, 0] / counts[:, 0]) * np.ones((J, J))
    idx = np.arange(J)
    v_y[idx, idx] = np.sum(w[:, None] * (variances[:, 1:] / counts[:, 1:] + (variances[:, 0] / counts[:, 0])[:, None]), axis=0)
    return MultiEstimate(theta, VarianceMatrix(v_h + v_y), v_h, v_y, n, level)
