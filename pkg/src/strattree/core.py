"""Covariate spaces, samples and stratification trees.

A stratification tree is a binary tree partition of a rectangular covariate
space together with per-leaf treatment assignment targets. Internal nodes
send ``x`` left when ``x[dim] <= threshold`` and right otherwise; this
convention is used everywhere in the package.

Dimensions are 0-indexed (a cut written ``x1 <= 0.5`` in a data file's naming is
``Cut(dim=0, threshold=0.5)`` here). Leaf labels are 1-based.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator, Sequence, Union

import numpy as np

TREE_SCHEMA = "strattree/tree@1"


class StratTreeError(Exception):
    """Base class for errors raised by this package."""


class DomainError(StratTreeError, ValueError):
    """A covariate vector falls outside the covariate space."""


class ConfigError(StratTreeError, ValueError):
    """Invalid configuration or an argument combination that cannot be fit."""


class StructureError(StratTreeError, ValueError):
    """A tree is malformed or does not have the required shape."""


# ---------------------------------------------------------------------------
# Covariate space
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dimension:
    lower: float
    upper: float
    kind: str = "continuous"
    support: tuple[float, ...] | None = None

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ConfigError("dimension bounds must be finite")
        if not self.lower < self.upper:
            raise ConfigError(f"lower bound {self.lower} must be below upper bound {self.upper}")
        if self.kind not in ("continuous", "discrete"):
            raise ConfigError(f"unknown dimension kind {self.kind!r}")
        if self.kind == "discrete":
            if not self.support:
                raise ConfigError("discrete dimensions need a nonempty support")
            support = tuple(sorted(float(s) for s in self.support))
            if support[0] < self.lower or support[-1] > self.upper:
                raise ConfigError("discrete support must lie inside the bounds")
            object.__setattr__(self, "support", support)
        elif self.support is not None:
            raise ConfigError("only discrete dimensions carry a support")

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "lower": self.lower, "upper": self.upper}
        if self.support is not None:
            out["support"] = list(self.support)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Dimension":
        support = d.get("support")
        return cls(
            lower=float(d["lower"]),
            upper=float(d["upper"]),
            kind=d.get("kind", "continuous"),
            support=tuple(support) if support is not None else None,
        )


@dataclass(frozen=True)
class CovariateSpace:
    """Product of closed intervals ``[lower_j, upper_j]``."""

    dims: tuple[Dimension, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        if not self.dims:
            raise ConfigError("a covariate space needs at least one dimension")

    @classmethod
    def unit_cube(cls, d: int) -> "CovariateSpace":
        return cls(tuple(Dimension(0.0, 1.0) for _ in range(d)))

    @classmethod
    def bounding(cls, x: np.ndarray) -> "CovariateSpace":
        """Smallest box containing the rows of ``x`` (constant columns are widened by 1)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        dims = []
        for lo, hi in zip(x.min(axis=0), x.max(axis=0)):
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
            dims.append(Dimension(float(lo), float(hi)))
        return cls(tuple(dims))

    @property
    def d(self) -> int:
        return len(self.dims)

    @cached_property
    def lower(self) -> np.ndarray:
        return np.array([dim.lower for dim in self.dims])

    @cached_property
    def upper(self) -> np.ndarray:
        return np.array([dim.upper for dim in self.dims])

    def check(self, x: np.ndarray) -> None:
        """Raise ``DomainError`` naming the first dimension where ``x`` is out of bounds.

        ``x`` may be a single vector or a 2-d array of rows.
        """
        x = np.asarray(x, dtype=float)
        rows = np.atleast_2d(x)
        if rows.shape[1] != self.d:
            raise DomainError(f"expected {self.d} covariates, got {rows.shape[1]}")
        bad = (rows < self.lower) | (rows > self.upper) | ~np.isfinite(rows)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise DomainError(
                f"covariate x{j + 1} (dim {j}) = {rows[i, j]!r} of row {i} is outside "
                f"[{self.dims[j].lower}, {self.dims[j].upper}]"
            )

    def to_list(self) -> list:
        return [dim.to_dict() for dim in self.dims]

    @classmethod
    def from_list(cls, items: list) -> "CovariateSpace":
        return cls(tuple(Dimension.from_dict(d) for d in items))


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Sample:
    """Observed experimental data: outcomes ``y``, arm labels ``a`` and covariates ``x``.

    Arm labels are integers ``0..J`` where 0 is control; every label in that
    range must be present.
    """

    y: np.ndarray
    a: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=float).reshape(-1)
        a = np.ascontiguousarray(self.a).reshape(-1)
        x = np.ascontiguousarray(np.asarray(self.x, dtype=float))
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if not (len(y) == len(a) == len(x)):
            raise ValueError("y, a and x must have the same number of rows")
        if len(y) == 0:
            raise ValueError("a sample needs at least one row")
        if not np.all(np.isfinite(y)):
            raise ValueError("outcomes must be finite")
        if not np.issubdtype(a.dtype, np.integer):
            if not np.all(np.equal(np.mod(a, 1), 0)):
                raise ValueError("treatment labels must be integers")
        a = a.astype(np.int64)
        labels = np.unique(a)
        if labels[0] != 0 or not np.array_equal(labels, np.arange(len(labels))):
            raise ValueError(
                f"treatment labels must be the contiguous range 0..J, got {labels.tolist()}"
            )
        if len(labels) < 2:
            raise ValueError("a sample needs at least one treated and one control row")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "x", x)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_arms(self) -> int:
        """Number of arms including control (``J + 1``)."""
        return int(self.a.max()) + 1

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def take(self, idx) -> "Sample":
        return Sample(self.y[idx], self.a[idx], self.x[idx])


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Cut:
    dim: int
    threshold: float


@dataclass(frozen=True)
class Leaf:
    label: int = 1
    pi: tuple[float, ...] = (0.5,)

    def __post_init__(self):
        pi = self.pi
        if isinstance(pi, (int, float)):
            pi = (float(pi),)
        elif not (type(pi) is tuple and all(type(p) is float for p in pi)):
            pi = tuple(float(p) for p in np.atleast_1d(pi))
        object.__setattr__(self, "pi", pi)


@dataclass(frozen=True)
class Split:
    cut: Cut
    left: "Node"
    right: "Node"


Node = Union[Leaf, Split]


def node_depth(node: Node) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + max(node_depth(node.left), node_depth(node.right))


def iter_leaves(node: Node) -> Iterator[Leaf]:
    if isinstance(node, Leaf):
        yield node
    else:
        yield from iter_leaves(node.left)
        yield from iter_leaves(node.right)


def structure_key(node: Node) -> tuple:
    """Hashable description of the partition structure, ignoring labels and targets."""
    if isinstance(node, Leaf):
        return ()
    return (node.cut.dim, node.cut.threshold, structure_key(node.left), structure_key(node.right))


def relabel(node: Node, start: int = 1) -> tuple[Node, int]:
    """Number leaves left-to-right starting at ``start``; returns (node, next label)."""
    if isinstance(node, Leaf):
        if node.label == start:
            return node, start + 1
        return Leaf(start, node.pi), start + 1
    left, nxt = relabel(node.left, start)
    right, nxt = relabel(node.right, nxt)
    if left is node.left and right is node.right:
        return node, nxt
    return Split(node.cut, left, right), nxt


@dataclass(frozen=True)
class StratificationTree:
    """A tree partition of ``space`` with per-leaf assignment targets.

    ``max_depth`` is the depth budget ``L`` of the tree class the tree belongs
    to; the tree itself may be shallower.
    """

    root: Node
    space: CovariateSpace
    max_depth: int

    def __post_init__(self):
        if self.max_depth < 0:
            raise StructureError("max_depth must be nonnegative")
        if node_depth(self.root) > self.max_depth:
            raise StructureError(
                f"tree depth {node_depth(self.root)} exceeds max_depth {self.max_depth}"
            )
        self._validate(self.root, self.space.lower.copy(), self.space.upper.copy())
        arms = {len(leaf.pi) for leaf in iter_leaves(self.root)}
        if len(arms) != 1:
            raise StructureError("all leaves must carry targets for the same number of arms")

    def _validate(self, node, lo, hi):
        if isinstance(node, Leaf):
            pi = node.pi
            if min(pi) <= 0 or max(pi) >= 1 or sum(pi) >= 1:
                raise StructureError(f"invalid assignment targets {node.pi}")
            return
        j, g = node.cut.dim, node.cut.threshold
        if not 0 <= j < self.space.d:
            raise StructureError(f"cut dimension {j} outside the space")
        if not lo[j] < g < hi[j]:
            raise StructureError(
                f"cut x{j + 1} <= {g} is not strictly inside its cell ({lo[j]}, {hi[j]})"
            )
        saved = hi[j]
        hi[j] = g
        self._validate(node.left, lo, hi)
        hi[j] = saved
        saved = lo[j]
        lo[j] = g
        self._validate(node.right, lo, hi)
        lo[j] = saved

    # -- basic structure ---------------------------------------------------

    @classmethod
    def trivial(cls, space: CovariateSpace, max_depth: int = 0, pi: float | Sequence[float] = 0.5):
        """The depth-0 tree: one stratum covering the whole space."""
        return cls(Leaf(1, tuple(np.atleast_1d(pi))), space, max_depth)

    @property
    def depth(self) -> int:
        return node_depth(self.root)

    @cached_property
    def leaves(self) -> tuple[Leaf, ...]:
        return tuple(iter_leaves(self.root))

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    @property
    def n_treatments(self) -> int:
        """Number of non-control arms ``J``."""
        return len(self.leaves[0].pi)

    @property
    def labels(self) -> list[int]:
        return [leaf.label for leaf in self.leaves]

    @property
    def pi(self) -> np.ndarray:
        """Targets indexed by canonical position, shape ``(K, J)``."""
        return np.array([leaf.pi for leaf in self.leaves])

    @cached_property
    def key(self) -> tuple:
        return structure_key(self.root)

    def internal_cuts(self) -> list[Cut]:
        out = []

        def walk(node):
            if isinstance(node, Split):
                out.append(node.cut)
                walk(node.left)
                walk(node.right)

        walk(self.root)
        return out

    def with_root(self, root: Node) -> "StratificationTree":
        return StratificationTree(relabel(root)[0], self.space, self.max_depth)

    def with_pi(self, pis) -> "StratificationTree":
        """Replace leaf targets, given in left-to-right leaf order."""
        pis = [tuple(np.atleast_1d(p)) for p in pis]
        if len(pis) != self.n_leaves:
            raise ValueError(f"expected {self.n_leaves} targets, got {len(pis)}")
        it = iter(pis)

        def rebuild(node):
            if isinstance(node, Leaf):
                return Leaf(node.label, next(it))
            return Split(node.cut, rebuild(node.left), rebuild(node.right))

        return StratificationTree(rebuild(self.root), self.space, self.max_depth)

    def cells(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(lower, upper) bounds of each leaf cell in left-to-right order.

        A cell is ``{x : lower_j < x_j <= upper_j}`` except on the boundary of
        the space where the lower bound is inclusive.
        """
        out = []

        def walk(node, lo, hi):
            if isinstance(node, Leaf):
                out.append((lo.copy(), hi.copy()))
                return
            j, g = node.cut.dim, node.cut.threshold
            h = hi.copy()
            h[j] = g
            walk(node.left, lo, h)
            l = lo.copy()
            l[j] = g
            walk(node.right, l, hi)

        walk(self.root, self.space.lower.copy(), self.space.upper.copy())
        return out

    # -- lookup -------------------------------------------------------------

    @cached_property
    def flat(self) -> "FlatTree":
        return FlatTree.from_node(self.root)

    def leaf_index(self, x: np.ndarray) -> np.ndarray:
        """Left-to-right position (0-based) of the leaf containing each row of ``x``.

        No bounds checking; see ``strata`` for the checked version.
        """
        from ._kernels import leaf_positions

        x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=float)))
        f = self.flat
        return leaf_positions(x, f.feature, f.threshold, f.left, f.right, f.position)

    def strata(self, x: np.ndarray) -> np.ndarray:
        """Stratum labels for each row of ``x`` (bounds checked)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        self.space.check(x)
        labels = np.array(self.labels, dtype=np.int64)
        return labels[self.leaf_index(x)]

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        def enc(node):
            if isinstance(node, Leaf):
                return {"leaf": node.label, "pi": list(node.pi)}
            return {
                "cut": {"dim": node.cut.dim, "threshold": node.cut.threshold},
                "left": enc(node.left),
                "right": enc(node.right),
            }

        return {
            "schema": TREE_SCHEMA,
            "depth": self.max_depth,
            "space": self.space.to_list(),
            "root": enc(self.root),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StratificationTree":
        def dec(node):
            if "leaf" in node:
                return Leaf(int(node["leaf"]), tuple(float(p) for p in node["pi"]))
            cut = node["cut"]
            return Split(Cut(int(cut["dim"]), float(cut["threshold"])), dec(node["left"]), dec(node["right"]))

        return cls(dec(d["root"]), CovariateSpace.from_list(d["space"]), int(d["depth"]))

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str) -> "StratificationTree":
        return cls.from_dict(json.loads(text))

    def describe(self) -> str:
        """Indented text rendering, one line per node."""
        lines = []

        def walk(node, indent, prefix):
            pad = "  " * indent
            if isinstance(node, Leaf):
                pis = ", ".join(f"{p:.3f}" for p in node.pi)
                lines.append(f"{pad}{prefix}stratum {node.label}: pi = {pis}")
                return
            j, g = node.cut.dim, node.cut.threshold
            lines.append(f"{pad}{prefix}split x{j + 1} <= {g:.6g}")
            walk(node.left, indent + 1, "yes: ")
            walk(node.right, indent + 1, "no:  ")

        walk(self.root, 0, "")
        return "\n".join(lines)


@dataclass(frozen=True, eq=False)
class FlatTree:
    """Array encoding of a tree for compiled traversal (preorder node ids)."""

    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    position: np.ndarray  # left-to-right leaf position, -1 for internal nodes
    n_leaves: int = field(default=0)

    @classmethod
    def from_key(cls, key: tuple) -> "FlatTree":
        feature, threshold, left, right, position = [], [], [], [], []
        counter = 0

        def visit(k):
            nonlocal counter
            i = len(feature)
            if not k:
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                position.append(counter)
                counter += 1
                return i
            feature.append(k[0])
            threshold.append(k[1])
            left.append(-1)
            right.append(-1)
            position.append(-1)
            left[i] = visit(k[2])
            right[i] = visit(k[3])
            return i

        visit(key)
        return cls(
            np.array(feature, dtype=np.int64),
            np.array(threshold, dtype=float),
            np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64),
            np.array(position, dtype=np.int64),
            counter,
        )

    @classmethod
    def from_node(cls, root: Node) -> "FlatTree":
        feature, threshold, left, right, position = [], [], [], [], []
        counter = [0]

        def visit(node):
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            position.append(-1)
            if isinstance(node, Leaf):
                position[i] = counter[0]
                counter[0] += 1
            else:
                feature[i] = node.cut.dim
                threshold[i] = node.cut.threshold
                left[i] = visit(node.left)
                right[i] = visit(node.right)
            return i

        visit(root)
        return cls(
            np.array(feature, dtype=np.int64),
            np.array(threshold, dtype=float),
            np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64),
            np.array(position, dtype=np.int64),
            counter[0],
        )


def stratum_of(tree: StratificationTree, x) -> int:
    """Label of the stratum containing the covariate vector ``x``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    tree.space.check(x)
    node = tree.root
    while isinstance(node, Split):
        node = node.left if x[node.cut.dim] <= node.cut.threshold else node.right
    return node.label


# ---------------------------------------------------------------------------
# Canonical representation
# ---------------------------------------------------------------------------


def canonical_labels(tree: StratificationTree) -> StratificationTree:
    """Canonical representative of ``tree``'s partition, labelled left to right.

    When several cut sequences within the depth budget produce the same
    partition, the root cut is the lexicographically smallest ``(dim,
    threshold)`` pair that still admits a representation of depth at most
    ``max_depth``; the rule is applied recursively, left subtree first.
    """
    recipe = _canonical_recipe(tree.key, tree.max_depth, tuple(tree.space.lower), tuple(tree.space.upper))
    leaves = tree.leaves
    counter = iter(range(1, len(leaves) + 1))

    def build(r):
        if isinstance(r, int):
            return Leaf(next(counter), leaves[r].pi)
        cut, left, right = r
        return Split(cut, build(left), build(right))

    root = build(recipe)
    if root == tree.root:
        return tree
    return StratificationTree(root, tree.space, tree.max_depth)


@functools.lru_cache(maxsize=200_000)
def canonical_key(key: tuple, budget: int, lower: tuple, upper: tuple) -> tuple:
    """Structure key of the canonical representative of a partition (see ``canonical_labels``)."""

    def conv(r):
        if isinstance(r, int):
            return ()
        cut, left, right = r
        return (cut.dim, cut.threshold, conv(left), conv(right))

    return conv(_canonical_recipe(key, budget, lower, upper))


@functools.lru_cache(maxsize=200_000)
def node_from_key(key: tuple) -> Node:
    """Tree node with default targets built from a structure key, leaves labelled left to right."""
    return relabel(_node_from_key(key))[0]


def _node_from_key(key):
    if not key:
        return Leaf()
    j, g, kl, kr = key
    return Split(Cut(j, g), _node_from_key(kl), _node_from_key(kr))


def _cells_from_key(key, lower, upper):
    cells = []

    def walk(k, lo, hi):
        if not k:
            cells.append((lo, hi))
            return
        j, g, kl, kr = k
        walk(kl, lo, hi[:j] + (g,) + hi[j + 1 :])
        walk(kr, lo[:j] + (g,) + lo[j + 1 :], hi)

    walk(key, lower, upper)
    return cells


_COMPILED_MAX_LEAVES = 12


@functools.lru_cache(maxsize=100_000)
def _canonical_recipe(key, budget, lower, upper):
    """Nested ``(Cut, left, right)`` tuples with ints for original leaf positions."""
    flat = FlatTree.from_key(key)
    if flat.n_leaves <= _COMPILED_MAX_LEAVES:
        from ._kernels import canonical_preorder, leaf_cells

        lo_arr, hi_arr = np.array(lower), np.array(upper)
        lo, hi = leaf_cells(flat.feature, flat.threshold, flat.left, flat.right, flat.position, flat.n_leaves, lo_arr, hi_arr)
        dims, thr, leaf, n = canonical_preorder(lo, hi, hi_arr, budget)
        if n < 0:
            raise StructureError("partition cannot be represented within the depth budget")
        dims, thr, leaf = dims.tolist(), thr.tolist(), leaf.tolist()
        pos = 0

        def parse():
            nonlocal pos
            i = pos
            pos += 1
            if dims[i] < 0:
                return leaf[i]
            left = parse()
            return (Cut(dims[i], thr[i]), left, parse())

        return parse()
    return _canonical_recipe_py(key, budget, lower, upper)


def _canonical_recipe_py(key, budget, lower, upper):
    cells = _cells_from_key(key, lower, upper)
    # every guillotine cut of a sub-partition sits on some cell's upper face;
    # store, per candidate cut, bitmasks of the cells lying below and above it
    cuts = sorted({(j, hi[j]) for _, hi in cells for j in range(len(lower)) if hi[j] < upper[j]})
    masks = []
    for j, g in cuts:
        below = above = 0
        for i, (lo, hi) in enumerate(cells):
            if hi[j] <= g:
                below |= 1 << i
            elif lo[j] >= g:
                above |= 1 << i
        masks.append((below, above))
    options_memo: dict = {}
    depth_memo: dict = {}

    def options(region):
        out = options_memo.get(region)
        if out is None:
            out = []
            for c, (below, above) in enumerate(masks):
                if region & ~(below | above):
                    continue
                left, right = region & below, region & above
                if left and right:
                    out.append((c, left, right))
            options_memo[region] = out
        return out

    def min_depth(region):
        if region & (region - 1) == 0:
            return 0
        best = depth_memo.get(region)
        if best is None:
            floor = (bin(region).count("1") - 1).bit_length()
            best = math.inf
            for _, left, right in options(region):
                best = min(best, 1 + max(min_depth(left), min_depth(right)))
                if best == floor:
                    break
            depth_memo[region] = best
        return best

    def build(region, remaining):
        if region & (region - 1) == 0:
            return region.bit_length() - 1
        for c, left, right in options(region):
            if min_depth(left) <= remaining - 1 and min_depth(right) <= remaining - 1:
                j, g = cuts[c]
                return (Cut(j, g), build(left, remaining - 1), build(right, remaining - 1))
        raise StructureError("partition cannot be represented within the depth budget")

    return build((1 << len(cells)) - 1, budget)


# ---------------------------------------------------------------------------
# Distance
# ---------------------------------------------------------------------------


def tree_distance(t1: StratificationTree, t2: StratificationTree, reference: Sample | np.ndarray) -> float:
    """Empirical symmetric-difference distance between two partitions.

    Sums, over strata ``k``, the share of ``reference`` rows lying in exactly
    one of the two ``k``-th cells.
    """
    if t1.n_leaves != t2.n_leaves:
        raise ValueError(
            f"trees have different leaf counts ({t1.n_leaves} vs {t2.n_leaves})"
        )
    x = reference.x if isinstance(reference, Sample) else np.atleast_2d(reference)
    s1 = t1.strata(x)
    s2 = t2.strata(x)
    return 2.0 * float(np.count_nonzero(s1 != s2)) / len(x)


# ---------------------------------------------------------------------------
# Fit configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EAConfig:
    population: int = 500
    max_iterations: int = 2000
    patience: int = 50
    tolerance: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError("population must be at least 2")
        if self.tolerance <= 0:
            raise ConfigError("tolerance must be positive")
        if self.max_iterations < 1 or self.patience < 1:
            raise ConfigError("max_iterations and patience must be positive")


@dataclass(frozen=True)
class FitConfig:
    """Settings for fitting a stratification tree.

    ``split_grid`` is ``"midpoints"`` (midpoints between consecutive distinct
    pilot values; support points for discrete dimensions) or an explicit
    sequence of candidate thresholds per dimension.
    """

    max_depth: int = 2
    nu: float = 0.1
    min_cell_per_arm: int = 2
    ea: EAConfig = field(default_factory=EAConfig)
    split_grid: object = "midpoints"
    folds: int = 2

    def __post_init__(self):
        if not 0 < self.nu < 0.5:
            raise ConfigError("nu must lie in (0, 0.5)")
        if self.max_depth < 0:
            raise ConfigError("max_depth must be nonnegative")
        if self.min_cell_per_arm < 1:
            raise ConfigError("min_cell_per_arm must be at least 1")
        if self.folds < 2:
            raise ConfigError("cross-validation needs at least two folds")
        if not isinstance(self.split_grid, str):
            grid = tuple(tuple(sorted(float(g) for g in dim)) for dim in self.split_grid)
            object.__setattr__(self, "split_grid", grid)
        elif self.split_grid != "midpoints":
            raise ConfigError(f"unknown split grid strategy {self.split_grid!r}")

    def replace(self, **changes) -> "FitConfig":
        ea_changes = {k: changes.pop(k) for k in list(changes) if k in EAConfig.__dataclass_fields__}
        ea = replace(self.ea, **ea_changes) if ea_changes else self.ea
        return replace(self, ea=ea, **changes)

    def to_dict(self) -> dict:
        grid = self.split_grid if isinstance(self.split_grid, str) else [list(g) for g in self.split_grid]
        return {
            "max_depth": self.max_depth,
            "nu": self.nu,
            "min_cell_per_arm": self.min_cell_per_arm,
            "ea": {
                "population": self.ea.population,
                "max_iterations": self.ea.max_iterations,
                "patience": self.ea.patience,
                "tolerance": self.ea.tolerance,
                "seed": self.ea.seed,
            },
            "split_grid": grid,
            "folds": self.folds,
        }


def candidate_thresholds(x: np.ndarray, space: CovariateSpace, split_grid="midpoints") -> list[np.ndarray]:
    """Sorted candidate split points per dimension, restricted to the open box."""
    x = np.atleast_2d(x)
    out = []
    for j, dim in enumerate(space.dims):
        if not isinstance(split_grid, str):
            values = np.asarray(split_grid[j], dtype=float)
        elif dim.kind == "discrete":
            values = np.asarray(dim.support, dtype=float)
        else:
            u = np.unique(x[:, j])
            values = (u[:-1] + u[1:]) / 2.0
        values = np.unique(values)
        values = values[(values > dim.lower) & (values < dim.upper)]
        out.append(values)
    return out
