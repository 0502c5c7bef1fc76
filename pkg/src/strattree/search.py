"""Evolutionary search for variance-minimising stratification trees.

A population of depth-1 trees is grown by applying one of five variation
operators (split, prune, minor mutation, major mutation, crossover) to each
parent and keeping whichever of parent and child has the smaller objective.
The search stops once the best 5% of the population agree to within a
relative tolerance for ``patience`` consecutive generations, or after
``max_iterations`` generations.

``exhaustive_search`` enumerates every tree on a small grid and serves as an
oracle for the evolutionary search.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ConfigError,
    CovariateSpace,
    Cut,
    FitConfig,
    Leaf,
    Node,
    Sample,
    Split,
    StratificationTree,
    StratTreeError,
    candidate_thresholds,
    canonical_key,
    canonical_labels,
    node_from_key,
    structure_key,
    node_depth,
    relabel,
)
from .objective import VarianceObjective

log = logging.getLogger(__name__)

REPORT_SCHEMA = "strattree/fit-report@1"
OPERATORS = ("split", "prune", "minor", "major", "crossover")


class BudgetExceeded(StratTreeError):
    """Exhaustive enumeration would exceed the evaluation budget."""

    def __init__(self, count: int, budget: int):
        super().__init__(f"at least {count} candidate trees; the budget is {budget}")
        self.count = count
        self.budget = budget


@dataclass
class FitReport:
    tree: StratificationTree
    objective: float
    trace: list[float]
    terminated: str
    generations: int
    evaluations: int = 0
    warning: str | None = None
    config: FitConfig | None = None

    def to_dict(self) -> dict:
        out = {
            "schema": REPORT_SCHEMA,
            "tree": self.tree.to_dict(),
            "objective": _json_float(self.objective),
            "trace": [_json_float(v) for v in self.trace],
            "terminated": self.terminated,
            "generations": self.generations,
            "evaluations": self.evaluations,
        }
        if self.warning:
            out["warning"] = self.warning
        if self.config is not None:
            out["config"] = self.config.to_dict()
        return out


def _json_float(v: float):
    return v if math.isfinite(v) else None


@dataclass
class EAState:
    generation: int
    parents: list[StratificationTree]
    values: list[float]
    best: tuple[StratificationTree, float]
    stagnation: int = 0
    trace: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Tree surgery helpers (paths are tuples of 0 = left, 1 = right)
# ---------------------------------------------------------------------------


def _get(node: Node, path) -> Node:
    for step in path:
        node = node.right if step else node.left
    return node


def _put(node: Node, path, new: Node) -> Node:
    if not path:
        return new
    if path[0]:
        return Split(node.cut, node.left, _put(node.right, path[1:], new))
    return Split(node.cut, _put(node.left, path[1:], new), node.right)


def _cell(root: Node, path, space: CovariateSpace):
    lo = space.lower.copy()
    hi = space.upper.copy()
    node = root
    for step in path:
        j, g = node.cut.dim, node.cut.threshold
        if step:
            lo[j] = g
            node = node.right
        else:
            hi[j] = g
            node = node.left
    return lo, hi


def _repair(node: Node, lo, hi, remaining: int) -> Node:
    """Collapse subtrees whose cut leaves an empty side, or that exceed the depth budget."""
    if isinstance(node, Leaf):
        return node
    j, g = node.cut.dim, node.cut.threshold
    if remaining <= 0 or not lo[j] < g < hi[j]:
        return Leaf()
    h = hi.copy()
    h[j] = g
    left = _repair(node.left, lo, h, remaining - 1)
    l = lo.copy()
    l[j] = g
    right = _repair(node.right, l, hi, remaining - 1)
    if left is node.left and right is node.right:
        return node
    return Split(node.cut, left, right)


def _is_valid(node: Node, lo, hi) -> bool:
    if isinstance(node, Leaf):
        return True
    j, g = node.cut.dim, node.cut.threshold
    if not lo[j] < g < hi[j]:
        return False
    h = hi.copy()
    h[j] = g
    l = lo.copy()
    l[j] = g
    return _is_valid(node.left, lo, h) and _is_valid(node.right, l, hi)


def _dim_thresholds(node: Node, j: int) -> list[float]:
    if isinstance(node, Leaf):
        return []
    own = [node.cut.threshold] if node.cut.dim == j else []
    return own + _dim_thresholds(node.left, j) + _dim_thresholds(node.right, j)


class _Grid:
    """Candidate thresholds per dimension with interval lookup."""

    def __init__(self, thresholds: list[np.ndarray]):
        self.values = [np.asarray(t, dtype=float) for t in thresholds]

    def inside(self, j: int, lo: float, hi: float) -> np.ndarray:
        v = self.values[j]
        a = np.searchsorted(v, lo, side="right")
        b = np.searchsorted(v, hi, side="left")
        return v[a:b]

    def random_cut(self, rng, lo, hi) -> Cut | None:
        """Uniform dimension (among those with room), then uniform threshold in the cell."""
        dims = [j for j in range(len(self.values)) if len(self.inside(j, lo[j], hi[j]))]
        if not dims:
            return None
        j = dims[rng.integers(len(dims))]
        options = self.inside(j, lo[j], hi[j])
        return Cut(j, float(options[rng.integers(len(options))]))


# ---------------------------------------------------------------------------
# The evolutionary search
# ---------------------------------------------------------------------------


class TreeSearch:
    """Evolutionary minimiser of a tree objective over depth-``max_depth`` trees.

    ``objective`` is any callable mapping a tree to ``(value, tree)`` where the
    returned tree carries optimised assignment targets; it defaults to the
    two-arm empirical variance criterion.
    """

    def __init__(self, pilot: Sample, config: FitConfig, space: CovariateSpace | None = None, objective=None):
        self.pilot = pilot
        self.config = config
        self.space = space or CovariateSpace.bounding(pilot.x)
        self.space.check(pilot.x)
        self.objective = objective or VarianceObjective(pilot, config)
        self.grid = _Grid(candidate_thresholds(pilot.x, self.space, config.split_grid))
        self.L = config.max_depth
        self._pi_template = tuple(self.objective(StratificationTree.trivial(self.space, self.L))[1].leaves[0].pi)
        self._by_key = getattr(self.objective, "evaluate_key", None)
        self._values: dict = {}
        self._lower, self._upper = self.space.lower, self.space.upper
        self._lo, self._hi = tuple(self._lower), tuple(self._upper)

    # -- construction --------------------------------------------------------

    def tree_from_key(self, key: tuple) -> tuple[float, StratificationTree]:
        root = _fill_pi(node_from_key(key), self._pi_template)
        return self.objective(StratificationTree(root, self.space, self.L))

    def evaluate(self, key: tuple) -> float:
        value = self._values.get(key)
        if value is None:
            if self._by_key is not None:
                value = self._by_key(key)[0]
            else:
                value = self.tree_from_key(key)[0]
            self._values[key] = value
        return value

    def _finish(self, root: Node) -> tuple[float, tuple]:
        """Repair, canonicalise and score a candidate; returns ``(value, key)``."""
        root = _repair(root, self._lower, self._upper, self.L)
        key = canonical_key(structure_key(root), self.L, self._lo, self._hi)
        return self.evaluate(key), key

    def generate_population(self, rng) -> list[tuple]:
        """Structure keys of random depth-1 trees (uniform dimension, uniform candidate threshold)."""
        if self.config.ea.population < 2:
            raise ConfigError("population must be at least 2")
        if not any(len(v) for v in self.grid.values):
            raise ConfigError("no candidate split points on any dimension")
        out = []
        for _ in range(self.config.ea.population):
            cut = self.grid.random_cut(rng, self._lower, self._upper)
            out.append(self._finish(Split(cut, Leaf(), Leaf()))[1])
        return out

    # -- walks ----------------------------------------------------------------

    @staticmethod
    def _walk_to_leaf(root: Node, rng) -> tuple:
        path = []
        node = root
        while isinstance(node, Split):
            step = int(rng.integers(2))
            path.append(step)
            node = node.right if step else node.left
        return tuple(path)

    @staticmethod
    def _walk_internal(root: Node, rng) -> tuple | None:
        """Path to an internal node reached after a uniform number of random steps."""
        if isinstance(root, Leaf):
            return None
        steps = int(rng.integers(node_depth(root)))
        path = []
        node = root
        for _ in range(steps):
            options = [s for s, child in ((0, node.left), (1, node.right)) if isinstance(child, Split)]
            if not options:
                break
            step = options[int(rng.integers(len(options)))]
            path.append(step)
            node = node.right if step else node.left
        return tuple(path)

    @staticmethod
    def _walk_any(root: Node, rng) -> tuple:
        steps = int(rng.integers(node_depth(root) + 1))
        path = []
        node = root
        for _ in range(steps):
            if isinstance(node, Leaf):
                break
            step = int(rng.integers(2))
            path.append(step)
            node = node.right if step else node.left
        return tuple(path)

    # -- operators ------------------------------------------------------------

    def split(self, root: Node, rng) -> Node:
        for _ in range(3):
            path = self._walk_to_leaf(root, rng)
            if len(path) >= self.L:
                continue
            lo, hi = _cell(root, path, self.space)
            cut = self.grid.random_cut(rng, lo, hi)
            if cut is None:
                continue
            return _put(root, path, Split(cut, Leaf(), Leaf()))
        return self.minor(root, rng)

    def prune(self, root: Node, rng) -> Node:
        if isinstance(root, Leaf):
            return root
        path = []
        node = root
        while not (isinstance(node.left, Leaf) and isinstance(node.right, Leaf)):
            options = [s for s, child in ((0, node.left), (1, node.right)) if isinstance(child, Split)]
            step = options[int(rng.integers(len(options)))]
            path.append(step)
            node = node.right if step else node.left
        return _put(root, tuple(path), Leaf())

    def minor(self, root: Node, rng) -> Node:
        path = self._walk_internal(root, rng)
        if path is None:
            return root
        node = _get(root, path)
        lo, hi = _cell(root, path, self.space)
        j = node.cut.dim
        below = _dim_thresholds(node.left, j)
        above = _dim_thresholds(node.right, j)
        a = max([lo[j]] + below)
        b = min([hi[j]] + above)
        options = self.grid.inside(j, a, b)
        options = options[options != node.cut.threshold]
        if not len(options):
            return root
        g = float(options[rng.integers(len(options))])
        return _put(root, path, Split(Cut(j, g), node.left, node.right))

    def major(self, root: Node, rng) -> Node:
        if isinstance(root, Leaf):
            return root
        for attempt in range(3):
            path = self._walk_internal(root, rng)
            node = _get(root, path)
            lo, hi = _cell(root, path, self.space)
            cut = self.grid.random_cut(rng, lo, hi)
            if cut is None:
                continue
            candidate = Split(cut, node.left, node.right)
            if _is_valid(candidate, lo, hi):
                return _put(root, path, candidate)
            if attempt == 2:
                return _put(root, path, _repair(candidate, lo, hi, self.L - len(path)))
        return root

    def crossover(self, root: Node, donor: Node, rng) -> Node:
        path = self._walk_any(root, rng)
        piece = _get(donor, self._walk_any(donor, rng))
        return _put(root, path, piece)

    def vary(self, parent: tuple, population: list[tuple], rng, index: int | None = None) -> tuple[float, tuple]:
        """Apply one uniformly chosen variation operator to the tree with key ``parent``.

        Returns ``(value, key)`` of the repaired, canonicalised child.
        """
        op = OPERATORS[int(rng.integers(len(OPERATORS)))]
        root = node_from_key(parent)
        if op == "split":
            new = self.split(root, rng)
        elif op == "prune":
            new = self.prune(root, rng)
        elif op == "minor":
            new = self.minor(root, rng)
        elif op == "major":
            new = self.major(root, rng)
        else:
            choices = [i for i in range(len(population)) if i != index] or [0]
            donor = population[choices[int(rng.integers(len(choices)))]]
            new = self.crossover(root, node_from_key(donor), rng)
        return self._finish(new)

    # -- main loop --------------------------------------------------------------

    def run(self) -> FitReport:
        ea = self.config.ea
        if self.L == 0:
            value, tree = self.tree_from_key(())
            warning = None if math.isfinite(value) else "objective is infinite for every candidate tree"
            return FitReport(tree, value, [value], "converged", 0, _evaluations(self.objective), warning, self.config)

        master = np.random.default_rng(ea.seed)
        streams = [np.random.default_rng(s) for s in master.bit_generator.seed_seq.spawn(ea.population + 1)]
        parents = self.generate_population(streams.pop())
        values = [self.evaluate(k) for k in parents]
        state = EAState(0, parents, values, self._best(parents, values))
        state.trace.append(state.best[1])
        top = max(1, math.ceil(0.05 * ea.population))
        terminated = "max_iterations"

        for generation in range(1, ea.max_iterations + 1):
            state.generation = generation
            snapshot = list(state.parents)
            for i in range(ea.population):
                v, child = self.vary(snapshot[i], snapshot, streams[i], i)
                if v < state.values[i]:
                    state.parents[i] = child
                    state.values[i] = v
            state.best = self._best(state.parents, state.values, state.best)
            state.trace.append(state.best[1])
            leaders = np.partition(np.asarray(state.values), top - 1)[:top]
            lo, hi = float(leaders.min()), float(leaders.max())
            if math.isfinite(hi) and hi - lo <= ea.tolerance * max(1.0, abs(lo)):
                state.stagnation += 1
            else:
                state.stagnation = 0
            if state.stagnation >= ea.patience:
                terminated = "converged"
                break

        best_key, best_value = state.best
        warning = None
        if not math.isfinite(best_value):
            warning = "objective is infinite for every candidate tree; returning the depth-0 tree"
            log.warning(warning)
            best_key = ()
        best_value, best_tree = self.tree_from_key(best_key)
        return FitReport(
            canonical_labels(best_tree), float(best_value), state.trace, terminated, state.generation,
            _evaluations(self.objective), warning, self.config,
        )

    @staticmethod
    def _best(keys, values, incumbent=None):
        """Smallest value; ties go to the incumbent, then to the smaller canonical structure."""
        best = incumbent
        for k, v in zip(keys, values):
            if best is None or v < best[1] or (v == best[1] and _order_key(k) < _order_key(best[0])):
                best = (k, v)
        if incumbent is not None and not best[1] < incumbent[1]:
            return incumbent
        return best


def _fill_pi(node: Node, template: tuple) -> Node:
    if isinstance(node, Leaf):
        return node if len(node.pi) == len(template) else Leaf(node.label, template)
    left = _fill_pi(node.left, template)
    right = _fill_pi(node.right, template)
    if left is node.left and right is node.right:
        return node
    return Split(node.cut, left, right)


def _evaluations(objective) -> int:
    return int(getattr(objective, "evaluations", 0))


def fit(pilot: Sample, config: FitConfig | None = None, space: CovariateSpace | None = None, objective=None) -> FitReport:
    """Fit a stratification tree to pilot data with the evolutionary search."""
    config = config or FitConfig()
    return TreeSearch(pilot, config, space, objective).run()


def generate_population(pilot: Sample, config: FitConfig, rng, space: CovariateSpace | None = None):
    """Initial population of depth-1 trees, with Neyman targets."""
    search = TreeSearch(pilot, config, space)
    return [search.tree_from_key(k)[1] for k in search.generate_population(rng)]


def vary(parent: StratificationTree, pilot: Sample, config: FitConfig, rng, population=None) -> StratificationTree:
    """One variation step applied to ``parent``; returns the child with Neyman targets.

    ``population`` supplies crossover donors (defaults to ``parent`` alone).
    """
    search = TreeSearch(pilot, config, parent.space)
    keys = [canonical_labels(t).key for t in (population or [parent])]
    parent_key = canonical_key(parent.key, config.max_depth, search._lo, search._hi)
    return search.tree_from_key(search.vary(parent_key, keys, rng)[1])[1]


# ---------------------------------------------------------------------------
# Exhaustive oracle
# ---------------------------------------------------------------------------


def count_trees(space: CovariateSpace, grid: list, max_depth: int, cap: int | None = None) -> int:
    """Number of (not necessarily distinct) trees of depth at most ``max_depth`` on ``grid``.

    Only the number of grid points inside a cell matters, so the recursion runs
    on those counts. With ``cap`` the result saturates at ``cap + 1``.
    """
    g = _Grid(grid)
    start = tuple(len(g.inside(j, space.lower[j], space.upper[j])) for j in range(space.d))
    limit = math.inf if cap is None else cap + 1
    memo: dict = {}

    def count(sizes, depth):
        key = (sizes, depth)
        if key in memo:
            return memo[key]
        total = 1
        if depth > 0:
            for j, n in enumerate(sizes):
                for i in range(n):
                    left = tuple(sorted(sizes[:j] + (i,) + sizes[j + 1 :]))
                    right = tuple(sorted(sizes[:j] + (n - 1 - i,) + sizes[j + 1 :]))
                    total += count(left, depth - 1) * count(right, depth - 1)
                    if total >= limit:
                        total = limit
                        break
                if total >= limit:
                    break
        memo[key] = total
        return total

    return int(count(tuple(sorted(start)), max_depth))


def enumerate_trees(space: CovariateSpace, grid: list, max_depth: int):
    """Yield every tree root of depth at most ``max_depth`` whose cuts come from ``grid``."""
    g = _Grid(grid)

    def gen(lo, hi, depth):
        yield Leaf()
        if depth == 0:
            return
        for j in range(space.d):
            for t in g.inside(j, lo[j], hi[j]):
                t = float(t)
                h = hi.copy()
                h[j] = t
                l = lo.copy()
                l[j] = t
                lefts = list(gen(lo, h, depth - 1))
                rights = list(gen(l, hi, depth - 1))
                for left, right in itertools.product(lefts, rights):
                    yield Split(Cut(j, t), left, right)

    yield from gen(space.lower.copy(), space.upper.copy(), max_depth)


def exhaustive_search(
    pilot: Sample,
    max_depth: int,
    grid: list | None = None,
    config: FitConfig | None = None,
    space: CovariateSpace | None = None,
    budget: int = 10_000_000,
    objective=None,
) -> tuple[StratificationTree, float]:
    """Global minimiser of the objective over all trees on ``grid`` (brute force).

    Ties are broken towards the smaller canonical structure.
    """
    config = (config or FitConfig()).replace(max_depth=max_depth)
    space = space or CovariateSpace.bounding(pilot.x)
    if grid is None:
        grid = candidate_thresholds(pilot.x, space, config.split_grid)
    count = count_trees(space, grid, max_depth, cap=budget)
    if count > budget:
        raise BudgetExceeded(count, budget)
    objective = objective or VarianceObjective(pilot, config)
    template = objective(StratificationTree.trivial(space, max_depth))[1].leaves[0].pi
    best = None
    seen = set()
    for root in enumerate_trees(space, grid, max_depth):
        tree = canonical_labels(StratificationTree(relabel(_fill_pi(root, template))[0], space, max_depth))
        if tree.key in seen:
            continue
        seen.add(tree.key)
        value, tree = objective(tree)
        rank = (value, _order_key(tree.key))
        if best is None or rank < best[0]:
            best = (rank, tree)
    (value, _), tree = best
    return tree, float(value)


def _order_key(key) -> tuple:
    """Total order on structures: fewer cuts first, then lexicographic preorder cuts."""
    flat = []

    def walk(k):
        if not k:
            flat.append((-1, 0.0))
            return
        flat.append((k[0], k[1]))
        walk(k[2])
        walk(k[3])

    walk(key)
    return (len(flat), tuple(flat))
