"""Cross-validated choice of the tree depth.

The pilot is shuffled once and cut into folds (two by default). For every
depth ``L = 0..max_depth`` a tree is fit on each training part and its
empirical variance, using the targets chosen on the training part, is
evaluated on the held-out fold. The criterion averages the held-out values
and the smallest minimising depth wins; the returned tree is refit on the
full pilot at that depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, CovariateSpace, FitConfig, Sample, StratificationTree
from .objective import empirical_variance
from .search import FitReport, fit

CV_SCHEMA = "strattree/cv-report@1"


@dataclass
class CvReport:
    criterion: dict[int, float]
    chosen_depth: int
    fold_trees: dict[tuple[int, int], StratificationTree] = field(default_factory=dict)
    fold_values: dict[tuple[int, int], float] = field(default_factory=dict)
    final: FitReport | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        def num(v):
            return v if math.isfinite(v) else None

        return {
            "schema": CV_SCHEMA,
            "criterion": {str(L): num(v) for L, v in self.criterion.items()},
            "chosen_depth": self.chosen_depth,
            "folds": [
                {"depth": L, "fold": v, "value": num(self.fold_values[L, v]), "tree": t.to_dict()}
                for (L, v), t in sorted(self.fold_trees.items())
            ],
            "final": self.final.to_dict() if self.final is not None else None,
            "seed": self.seed,
        }


def fold_indices(m: int, folds: int, seed) -> list[np.ndarray]:
    """Seeded shuffle of ``range(m)`` cut into ``folds`` contiguous parts (earlier parts larger)."""
    order = np.random.default_rng(seed).permutation(m)
    return np.array_split(order, folds)


def _check_arms(rows: np.ndarray, a: np.ndarray, n_arms: int, what: str):
    present = np.unique(a[rows])
    if len(present) < n_arms:
        raise ConfigError(
            f"{what} is missing treatment arm(s) {sorted(set(range(n_arms)) - set(present.tolist()))}; "
            "use a different seed or a larger pilot"
        )


def cv_fit(
    pilot: Sample,
    max_depth: int,
    config: FitConfig | None = None,
    space: CovariateSpace | None = None,
    prefit: dict[int, FitReport] | None = None,
) -> tuple[StratificationTree, CvReport]:
    """Choose the depth by cross-validation and refit on the full pilot.

    ``prefit`` may map depths to full-pilot fits already computed with the same
    configuration; the refit at the chosen depth is then reused.
    """
    config = config or FitConfig()
    m = len(pilot)
    if m < 2 * config.folds:
        raise ConfigError(f"pilot of size {m} is too small for {config.folds}-fold cross-validation")
    space = space or CovariateSpace.bounding(pilot.x)
    seed = config.ea.seed
    parts = fold_indices(m, config.folds, seed)
    n_arms = pilot.n_arms
    for v, rows in enumerate(parts):
        _check_arms(rows, pilot.a, n_arms, f"fold {v + 1}")

    criterion: dict[int, float] = {}
    trees: dict = {}
    values: dict = {}
    for L in range(max_depth + 1):
        cfg = config.replace(max_depth=L)
        held_out = []
        for v, rows in enumerate(parts):
            train_rows = np.sort(np.concatenate([p for u, p in enumerate(parts) if u != v]))
            _check_arms(train_rows, pilot.a, n_arms, f"training part for fold {v + 1}")
            tree = fit(pilot.take(train_rows), cfg, space).tree
            value = empirical_variance(tree, pilot.take(np.sort(rows)), cfg)
            trees[L, v] = tree
            values[L, v] = value
            held_out.append(value)
        criterion[L] = float(np.mean(held_out)) if all(map(math.isfinite, held_out)) else math.inf

    best = min(criterion.values())
    chosen = next(L for L, c in criterion.items() if c == best)
    final = (prefit or {}).get(chosen)
    if final is None:
        final = fit(pilot, config.replace(max_depth=chosen), space)
    report = CvReport(criterion, chosen, trees, values, final, seed)
    return final.tree, report
