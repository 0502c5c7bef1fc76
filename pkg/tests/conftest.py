from __future__ import annotations

import numpy as np
import pytest

from strattree import CovariateSpace, Cut, Leaf, Sample, Split, StratificationTree


def four_leaf_tree(labels=(1, 2, 3, 4), pis=(0.5, 0.5, 0.5, 0.5)) -> StratificationTree:
    """Depth-2 tree cutting x1 at 0.5, then x2 at 0.8 on the left and x1 at 0.9 on the right."""
    l1, l2, l3, l4 = (Leaf(k, p) for k, p in zip(labels, pis))
    root = Split(Cut(0, 0.5), Split(Cut(1, 0.8), l1, l2), Split(Cut(0, 0.9), l3, l4))
    return StratificationTree(root, CovariateSpace.unit_cube(2), 2)


def stump(threshold: float, d: int = 1, dim: int = 0, pi=(0.5, 0.5), depth: int = 1) -> StratificationTree:
    root = Split(Cut(dim, threshold), Leaf(1, pi[0]), Leaf(2, pi[1]))
    return StratificationTree(root, CovariateSpace.unit_cube(d), depth)


def random_pilot(seed: int, m: int = 200, d: int = 2, effect=True) -> Sample:
    rng = np.random.default_rng(seed)
    x = rng.random((m, d))
    a = rng.integers(0, 2, m)
    a[:2] = (0, 1)
    signal = np.sin(4 * x[:, 0]) + (a * (x[:, -1] > 0.5) * 2 if effect else 0)
    y = signal + rng.normal(0, 0.5 + a * x[:, 0], m)
    return Sample(y, a, x)


@pytest.fixture
def tree4():
    return four_leaf_tree()


@pytest.fixture
def pilot():
    return random_pilot(0)
