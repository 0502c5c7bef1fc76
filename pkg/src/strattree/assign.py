"""Second-wave treatment assignment within the strata of a tree.

Stratified block randomization (SBR) treats exactly ``floor(n(k) * pi_a(k))``
units of arm ``a >= 1`` in stratum ``k``, the rest go to control, and every
such split of the stratum is equally likely. Simple random assignment draws
each unit's arm independently with the stratum's target probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import StratificationTree

SBR = "sbr"
SIMPLE = "simple"


@dataclass(frozen=True, eq=False)
class AssignmentPlan:
    strata: np.ndarray  # stratum label of each unit
    treatment: np.ndarray
    labels: np.ndarray  # 1..K
    counts: np.ndarray  # (K, J + 1) realised arm counts per stratum
    procedure: str
    seed: object = None

    @property
    def n(self) -> int:
        return len(self.treatment)

    @property
    def stratum_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def sbr_counts(n_k: int, pi) -> np.ndarray:
    """Arm counts ``(n_0, n_1, ..., n_J)`` for a stratum of size ``n_k`` under SBR.

    Each target is read as its shortest decimal form, so ``0.7`` of 10 units
    is exactly 7 rather than the floor of a rounded binary product.
    """
    treated = [math.floor(Fraction(repr(float(p))) * n_k) for p in np.atleast_1d(pi)]
    return np.array([n_k - sum(treated)] + treated, dtype=np.int64)


def _positions(tree: StratificationTree, xs) -> np.ndarray:
    """Left-to-right leaf position of each unit (bounds checked)."""
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        return np.empty(0, dtype=np.int64)
    xs = np.atleast_2d(xs)
    tree.space.check(xs)
    return tree.leaf_index(xs)


def _plan(tree, pos, treatment, procedure, seed) -> AssignmentPlan:
    labels = np.asarray(tree.labels, dtype=np.int64)
    counts = np.zeros((tree.n_leaves, tree.n_treatments + 1), dtype=np.int64)
    np.add.at(counts, (pos, treatment), 1)
    return AssignmentPlan(labels[pos], treatment, labels, counts, procedure, seed)


def assign_sbr(tree: StratificationTree, xs, seed=None) -> AssignmentPlan:
    """Stratified block randomization under ``tree``'s targets."""
    rng = np.random.default_rng(seed)
    pos = _positions(tree, xs)
    treatment = np.zeros(len(pos), dtype=np.int64)
    pi = tree.pi
    for k in range(tree.n_leaves):
        rows = np.flatnonzero(pos == k)
        if not len(rows):
            continue
        arms = np.repeat(np.arange(tree.n_treatments + 1), sbr_counts(len(rows), pi[k]))
        treatment[rows] = arms[rng.permutation(len(rows))]
    return _plan(tree, pos, treatment, SBR, seed)


def assign_simple(tree: StratificationTree, xs, seed=None) -> AssignmentPlan:
    """Independent draws: unit ``i`` gets arm ``a`` with probability ``pi_a(S(x_i))``."""
    rng = np.random.default_rng(seed)
    pos = _positions(tree, xs)
    u = rng.random(len(pos))
    # arms 1..J occupy consecutive slices of [0, 1), control takes the rest
    edges = np.cumsum(tree.pi, axis=1)[pos]
    treatment = np.zeros(len(pos), dtype=np.int64)
    for a in range(tree.n_treatments, 0, -1):
        treatment[u < edges[:, a - 1]] = a
    return _plan(tree, pos, treatment, SIMPLE, seed)
