"""Monte Carlo evaluation of stratified two-wave designs.

Potential outcomes follow ``Y(a) = kappa_a(X) + nu_a(X) * eps_a`` where
each coordinate of ``X`` is Beta(2, 5) and ``eps_a ~ N(0, 0.1)`` with 0.1
read as the variance. Three benchmark models are provided. A study draws a pilot
under simple random assignment, builds a tree with each method, assigns a
main wave by stratified block randomization and pools the two waves.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .assign import assign_sbr, assign_simple
from .core import (
    ConfigError,
    CovariateSpace,
    Cut,
    EAConfig,
    FitConfig,
    Leaf,
    Sample,
    Split,
    StratificationTree,
    iter_leaves,
    relabel,
)
from .cv import cv_fit
from .estimate import EstimationError, critical_value, estimate_ate, estimate_pooled
from .search import fit

log = logging.getLogger(__name__)

METHODS = ("none", "adhoc", "strat_tree", "cv_tree", "infeasible")
LABELS = {
    "none": "No Stratification",
    "adhoc": "Ad-Hoc",
    "strat_tree": "Strat. Tree",
    "cv_tree": "CV Tree",
    "infeasible": "Optimal Tree",
}
REFERENCE_ATE = {1: 0.1257, 2: 0.0862, 3: 0.121}
NOMINAL_KAPPA0 = {1: 0.2, 2: 0.5, 3: 0.2}
NOISE_VARIANCE = 0.1
BETA_A, BETA_B = 2.0, 5.0

# Desk-scale search settings used by the simulation harness (full-size runs
# use FitConfig defaults).
SIM_EA = EAConfig(population=40, max_iterations=150, patience=30, tolerance=1e-8)


@dataclass(frozen=True)
class DgpSpec:
    """Outcome model ``Y(a) = kappa_a(X) + nu_a(X) * eps_a``.

    ``kappa1`` and ``nu1`` map an ``(n, d)`` covariate array to length-``n``
    arrays; the control arm has constant mean ``kappa0`` and scale ``nu0``.
    """

    model: object
    d: int
    kappa1: Callable[[np.ndarray], np.ndarray]
    nu1: Callable[[np.ndarray], np.ndarray]
    kappa0: float
    nu0: float
    true_ate: float
    noise_var: float = NOISE_VARIANCE

    @property
    def noise_sd(self) -> float:
        return math.sqrt(self.noise_var)

    @property
    def space(self) -> CovariateSpace:
        return CovariateSpace.unit_cube(self.d)


@dataclass(frozen=True, eq=False)
class PotentialOutcomes:
    x: np.ndarray
    y0: np.ndarray
    y1: np.ndarray

    def __len__(self) -> int:
        return len(self.y0)

    def observe(self, a: np.ndarray) -> Sample:
        a = np.asarray(a)
        return Sample(np.where(a == 1, self.y1, self.y0), a, self.x)

    def concat(self, other: "PotentialOutcomes") -> "PotentialOutcomes":
        return PotentialOutcomes(
            np.vstack([self.x, other.x]), np.concatenate([self.y0, other.y0]), np.concatenate([self.y1, other.y1])
        )


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


def _tail_mean(c: float) -> float:
    """E[X 1{X > c}] for X ~ Beta(2, 5)."""
    return BETA_A / (BETA_A + BETA_B) * stats.beta(BETA_A + 1, BETA_B).sf(c)


def _tail_prob(c: float) -> float:
    return float(stats.beta(BETA_A, BETA_B).sf(c))


def _weights(model: int) -> tuple[np.ndarray, np.ndarray]:
    j = np.arange(1, 11)
    sign = (-1.0) ** (j - 1)
    if model == 2:
        w = 10.0 ** (2 - j)
    else:
        w = np.where(j <= 3, 10.0, 5.0)
    return sign * w, w


def mean_kappa1(model: int) -> float:
    """Exact E[kappa_1(X)] for a benchmark model."""
    if model == 1:
        return 10 * _tail_mean(0.4) - 5 * _tail_mean(0.4)
    signed, _ = _weights(model)
    return float(signed.sum() * _tail_prob(0.4))


def model(number: int, kappa0: str | float = "calibrated") -> DgpSpec:
    """Benchmark model 1, 2 or 3.

    ``kappa0="calibrated"`` sets the control mean so the average effect equals
    the reference value (0.1257, 0.0862, 0.121); ``"nominal"`` uses the
    round constants 0.2, 0.5, 0.2; a number is used as is.
    """
    if number not in (1, 2, 3):
        raise ValueError(f"unknown model {number!r}; expected 1, 2 or 3")
    ek1 = mean_kappa1(number)
    if kappa0 == "calibrated":
        k0 = ek1 - REFERENCE_ATE[number]
    elif kappa0 == "nominal":
        k0 = NOMINAL_KAPPA0[number]
    else:
        k0 = float(kappa0)
    if number == 1:
        def kappa1(x):
            return 10 * x[:, 0] * (x[:, 0] > 0.4) - 5 * x[:, 1] * (x[:, 1] > 0.4)

        def nu1(x):
            return 1 + 10 * x[:, 0] * (x[:, 0] > 0.6) + 5 * x[:, 1] * (x[:, 1] > 0.6)

        return DgpSpec(1, 2, kappa1, nu1, k0, 5.0, ek1 - k0)

    signed, w = _weights(number)

    def kappa1(x):
        return (x > 0.4) @ signed

    def nu1(x):
        return 1 + (x > 0.6) @ w

    return DgpSpec(number, 10, kappa1, nu1, k0, 5.0 if number == 2 else 9.0, ek1 - k0)


def draw(dgp: DgpSpec, n: int, seed=None) -> PotentialOutcomes:
    """``n`` i.i.d. draws of ``(X, Y(0), Y(1))``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    x = rng.beta(BETA_A, BETA_B, size=(n, dgp.d))
    eps = rng.normal(0.0, dgp.noise_sd, size=(n, 2))
    y0 = dgp.kappa0 + dgp.nu0 * eps[:, 0]
    y1 = dgp.kappa1(x) + dgp.nu1(x) * eps[:, 1]
    return PotentialOutcomes(x, y0, y1)


# ---------------------------------------------------------------------------
# Fixed trees
# ---------------------------------------------------------------------------


def make_adhoc_tree(space: CovariateSpace, depth: int = 3, seed=None) -> StratificationTree:
    """Split every current stratum at its midpoint along one randomly chosen covariate, ``depth`` times."""
    rng = np.random.default_rng(seed)
    dims = [int(rng.integers(space.d)) for _ in range(depth)]

    def grow(level, lo, hi):
        if level == depth:
            return Leaf()
        j = dims[level]
        mid = (lo[j] + hi[j]) / 2
        h = hi.copy()
        h[j] = mid
        l = lo.copy()
        l[j] = mid
        return Split(Cut(j, float(mid)), grow(level + 1, lo, h), grow(level + 1, l, hi))

    root = grow(0, space.lower.copy(), space.upper.copy())
    return StratificationTree(relabel(root)[0], space, depth)


def _t(j, g, left, right):
    return Split(Cut(j - 1, g), left, right)


def _leaves(*pis):
    return [Leaf(pi=(p,)) for p in pis]


def infeasible_tree(model_id: int) -> StratificationTree:
    """Reference variance-optimal depth-3 tree for a benchmark model (fixed cut order, not canonicalised)."""
    if model_id == 1:
        a, b, c, d, e, f, g, h = _leaves(0.17, 0.19, 0.22, 0.54, 0.19, 0.39, 0.36, 0.49)
        root = _t(2, 0.4,
                  _t(1, 0.48, _t(1, 0.4, a, b), _t(1, 0.59, c, d)),
                  _t(1, 0.4, _t(2, 0.55, e, f), _t(1, 0.56, g, h)))
        d_ = 2
    elif model_id == 2:
        a, b, c, d, e, f, g, h = _leaves(0.17, 0.19, 0.19, 0.19, 0.18, 0.21, 0.53, 0.6)
        root = _t(1, 0.49,
                  _t(1, 0.4, _t(2, 0.43, a, b), _t(1, 0.44, c, d)),
                  _t(1, 0.6, _t(1, 0.53, e, f), _t(1, 0.76, g, h)))
        d_ = 10
    elif model_id == 3:
        a, b, c, d, e, f, g, h = _leaves(0.39, 0.44, 0.43, 0.48, 0.43, 0.47, 0.48, 0.49)
        root = _t(1, 0.4,
                  _t(2, 0.4, _t(3, 0.4, a, b), _t(3, 0.4, c, d)),
                  _t(2, 0.4, _t(3, 0.4, e, f), _t(3, 0.4, g, h)))
        d_ = 10
    else:
        raise ValueError(f"no reference tree for model {model_id!r}")
    return StratificationTree(relabel(root)[0], CovariateSpace.unit_cube(d_), 3)


def random_tree(space: CovariateSpace, depth: int, seed=None, pi=(0.3, 0.7)) -> StratificationTree:
    """Full tree with uniformly random cuts inside each cell and random targets in ``pi``."""
    rng = np.random.default_rng(seed)

    def grow(level, lo, hi):
        if level == depth:
            return Leaf(pi=(float(rng.uniform(*pi)),))
        j = int(rng.integers(space.d))
        g = float(rng.uniform(lo[j], hi[j]))
        h = hi.copy()
        h[j] = g
        l = lo.copy()
        l[j] = g
        return Split(Cut(j, g), grow(level + 1, lo, h), grow(level + 1, l, hi))

    return StratificationTree(relabel(grow(0, space.lower.copy(), space.upper.copy()))[0], space, depth)


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    method: str
    coverage: float
    delta_length: float
    power: float
    delta_rmse: float
    reps: int
    coverage_se: float = 0.0
    delta_length_se: float = 0.0
    power_se: float = 0.0
    delta_rmse_se: float = 0.0
    rmse: float = float("nan")
    mean_length: float = float("nan")
    failures: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RepOutcome:
    theta: float
    ci_low: float
    ci_high: float


@dataclass
class StudyResult:
    rows: list[MetricsRow]
    outcomes: dict[str, list[RepOutcome | None]] = field(default_factory=dict)
    depths: dict[str, list[int]] = field(default_factory=dict)

    def row(self, method: str) -> MetricsRow:
        return next(r for r in self.rows if r.method == method)


def collapse_thin(tree: StratificationTree, sample: Sample) -> StratificationTree:
    """Merge every leaf that holds units but misses an arm into its sibling, repeatedly.

    A stratum with a single unit receives no treated unit under stratified
    block randomization, so the stratified estimator is undefined there. The
    merged cell keeps the size-weighted average target.
    """
    while True:
        counts = np.zeros((tree.n_leaves, sample.n_arms), dtype=np.int64)
        np.add.at(counts, (tree.leaf_index(sample.x), sample.a), 1)
        thin = {k + 1 for k in range(tree.n_leaves) if counts[k].sum() > 0 and counts[k].min() == 0}
        if not thin:
            return tree
        sizes = {k + 1: int(counts[k].sum()) for k in range(tree.n_leaves)}

        def merge(node):
            if isinstance(node, Leaf):
                return node
            l, r = node.left, node.right
            if isinstance(l, Leaf) and isinstance(r, Leaf) and (l.label in thin or r.label in thin):
                wl, wr = sizes[l.label], sizes[r.label]
                w = wl / (wl + wr) if wl + wr else 0.5
                return Leaf(l.label, tuple(w * p + (1 - w) * q for p, q in zip(l.pi, r.pi)))
            return Split(node.cut, merge(l), merge(r))

        root = merge(tree.root)
        if root == tree.root:
            # a thin leaf whose sibling is a subtree: fold the whole parent
            root = _fold_parent(tree.root, thin)
        tree = StratificationTree(relabel(root)[0], tree.space, tree.max_depth)


def _fold_parent(node, thin):
    if isinstance(node, Leaf):
        return node
    for child in (node.left, node.right):
        if isinstance(child, Leaf) and child.label in thin:
            pis = np.array([leaf.pi for leaf in iter_leaves(node)])
            return Leaf(child.label, tuple(pis.mean(axis=0)))
    return Split(node.cut, _fold_parent(node.left, thin), _fold_parent(node.right, thin))


def _estimate_two_wave(tree, pilot_est, main: PotentialOutcomes, seed, level):
    plan = assign_sbr(tree, main.x, seed)
    wave = main.observe(plan.treatment)
    est = estimate_ate(collapse_thin(tree, wave), wave, level)
    return estimate_pooled(pilot_est, est, level)


def run_rep(
    dgp: DgpSpec,
    methods: Sequence[str],
    pilot_n: int,
    main_n: int,
    level: float,
    seed: np.random.SeedSequence,
    fit_config: FitConfig,
    fixed_tree: StratificationTree | None = None,
) -> tuple[dict[str, RepOutcome | None], dict[str, int]]:
    """One Monte Carlo replication; the same draws are shared by every method."""
    s_pilot, s_pilot_assign, s_main, s_main_assign, s_adhoc, s_fit = seed.spawn(6)
    space = dgp.space
    out: dict[str, RepOutcome | None] = {}
    depths: dict[str, int] = {}
    pilot_po = draw(dgp, pilot_n, s_pilot) if pilot_n else None
    main_po = draw(dgp, main_n, s_main)
    assign_seed = int(s_main_assign.generate_state(1)[0])

    pilot_est = None
    pilot = None
    if pilot_po is not None:
        trivial = StratificationTree.trivial(space, 0, 0.5)
        plan = assign_simple(trivial, pilot_po.x, s_pilot_assign)
        pilot = pilot_po.observe(plan.treatment)
        try:
            pilot_est = estimate_ate(trivial, pilot, level)
        except (EstimationError, ValueError):
            pilot_est = None
    if pilot_po is not None and pilot_est is None:
        return {m: None for m in methods}, depths

    ea_seed = int(s_fit.generate_state(1)[0] % (2**31))
    cfg = fit_config.replace(seed=ea_seed)
    fits = {}

    def record(name, fn):
        try:
            r = fn()
            out[name] = RepOutcome(r.theta_hat, r.ci_low, r.ci_high)
        except EstimationError as exc:
            log.debug("rep failed for %s: %s", name, exc)
            out[name] = None

    for name in methods:
        if name == "none":
            tree = StratificationTree.trivial(space, 0, 0.5)
            record(name, lambda: _estimate_two_wave(tree, pilot_est, main_po, assign_seed, level))
        elif name == "adhoc":
            tree = make_adhoc_tree(space, fit_config.max_depth, s_adhoc)
            record(name, lambda: _estimate_two_wave(tree, pilot_est, main_po, assign_seed, level))
        elif name == "strat_tree":
            rep = fits.get(cfg.max_depth) or fit(pilot, cfg, space)
            fits[cfg.max_depth] = rep
            depths[name] = rep.tree.depth
            record(name, lambda: _estimate_two_wave(rep.tree, pilot_est, main_po, assign_seed, level))
        elif name == "cv_tree":
            tree, report = cv_fit(pilot, cfg.max_depth, cfg, space, prefit=fits)
            depths[name] = report.chosen_depth
            record(name, lambda: _estimate_two_wave(tree, pilot_est, main_po, assign_seed, level))
        elif name in ("infeasible", "fixed"):
            tree = fixed_tree if name == "fixed" else infeasible_tree(dgp.model)
            whole = pilot_po.concat(main_po) if pilot_po is not None else main_po
            wave = whole.observe(assign_sbr(tree, whole.x, assign_seed).treatment)
            record(name, lambda: estimate_ate(collapse_thin(tree, wave), wave, level))
        else:
            raise ConfigError(f"unknown method {name!r}")
    return out, depths


def run_study(
    dgp: DgpSpec,
    methods: Sequence[str] = METHODS,
    pilot_n: int = 500,
    main_n: int = 4500,
    reps: int = 100,
    level: float = 0.95,
    seed: int = 0,
    fit_config: FitConfig | None = None,
    fixed_tree: StratificationTree | None = None,
    progress: Callable[[int], None] | None = None,
    workers: int | None = 1,
) -> StudyResult:
    """Monte Carlo study of the requested stratification methods.

    Methods are ``none``, ``adhoc``, ``strat_tree``, ``cv_tree``,
    ``infeasible`` and ``fixed`` (assign the whole sample with ``fixed_tree``).
    ``none`` is always run because it is the baseline of the relative
    criteria. ``workers`` > 1 spreads replications over forked processes
    (``None`` uses every available CPU); each replication has its own seed so
    the result does not depend on the worker count.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    methods = list(dict.fromkeys(methods))
    for name in methods:
        if name not in METHODS and name != "fixed":
            raise ConfigError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    if "fixed" in methods and fixed_tree is None:
        raise ConfigError("method 'fixed' needs a tree")
    if pilot_n == 0 and any(m in ("strat_tree", "cv_tree") for m in methods):
        raise ConfigError("fitted trees need a pilot wave")
    run = (["none"] if "none" not in methods else []) + methods
    fit_config = fit_config or FitConfig(max_depth=3, ea=SIM_EA)
    children = np.random.SeedSequence(seed).spawn(reps)
    outcomes: dict[str, list] = {m: [] for m in run}
    depths: dict[str, list] = {}
    args = (dgp, run, pilot_n, main_n, level, children, fit_config, fixed_tree)
    for r, (res, dep) in enumerate(_replications(args, reps, workers)):
        for m in run:
            outcomes[m].append(res[m])
        for m, L in dep.items():
            depths.setdefault(m, []).append(L)
        if progress is not None:
            progress(r + 1)
    rows = summarize(outcomes, dgp.true_ate, level)
    rows = [row for row in rows if row.method in methods]
    return StudyResult(rows, outcomes, depths)


_JOB: tuple | None = None


def _job_init(args):
    global _JOB
    _JOB = args


def _job_rep(r: int):
    dgp, run, pilot_n, main_n, level, children, fit_config, fixed_tree = _JOB
    return run_rep(dgp, run, pilot_n, main_n, level, children[r], fit_config, fixed_tree)


def _replications(args, reps: int, workers: int | None):
    """Yield replication results in order, serially or from a fork pool."""
    workers = min(workers or os.cpu_count() or 1, reps)
    if workers <= 1 or "fork" not in multiprocessing.get_all_start_methods():
        _job_init(args)
        for r in range(reps):
            yield _job_rep(r)
        return
    # forked workers inherit the job, so model closures never need pickling
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(workers, mp_context=ctx, initializer=_job_init, initargs=(args,)) as pool:
        yield from pool.map(_job_rep, range(reps), chunksize=max(1, reps // (4 * workers)))


def _ratio_se(a, b):
    """Delta-method standard error of mean(a) / mean(b) for paired draws."""
    a, b = np.asarray(a), np.asarray(b)
    r = a.mean() / b.mean()
    return float(np.std(a - r * b, ddof=1) / (b.mean() * math.sqrt(len(a)))) if len(a) > 1 else 0.0


def summarize(outcomes: dict[str, list], true_ate: float, level: float = 0.95) -> list[MetricsRow]:
    """The four criteria, relative to ``none``, over reps where every method succeeded."""
    ok = [i for i in range(len(outcomes["none"])) if all(outcomes[m][i] is not None for m in outcomes)]
    if not ok:
        raise EstimationError("no replication succeeded for every method")
    R = len(ok)
    z = critical_value(level)

    def arrays(m):
        th = np.array([outcomes[m][i].theta for i in ok])
        lo = np.array([outcomes[m][i].ci_low for i in ok])
        hi = np.array([outcomes[m][i].ci_high for i in ok])
        return th, lo, hi

    th0, lo0, hi0 = arrays("none")
    len0 = hi0 - lo0
    sq0 = (th0 - true_ate) ** 2
    rows = []
    for m in outcomes:
        th, lo, hi = arrays(m)
        cover = (lo <= true_ate) & (true_ate <= hi)
        # two-sided test of a zero effect at the interval's level
        se = (hi - lo) / (2 * z)
        reject = np.abs(th) > z * se
        length = hi - lo
        sq = (th - true_ate) ** 2
        p_cov, p_pow = float(cover.mean()), float(reject.mean())
        mse0, mse = math.fsum(sq0) / R, math.fsum(sq) / R
        rmse_ratio = math.sqrt(mse / mse0)
        if m == "none":
            dl = dr = dl_se = dr_se = 0.0
        else:
            dl = 100 * (math.fsum(length) / math.fsum(len0) - 1)
            dl_se = 100 * _ratio_se(length, len0)
            dr = 100 * (rmse_ratio - 1)
            dr_se = 100 * _ratio_se(sq, sq0) / (2 * rmse_ratio)
        rows.append(MetricsRow(
            m, 100 * p_cov, dl, 100 * p_pow, dr, R,
            100 * math.sqrt(p_cov * (1 - p_cov) / R), dl_se, 100 * math.sqrt(p_pow * (1 - p_pow) / R), dr_se,
            math.sqrt(mse), math.fsum(length) / R, len(outcomes[m]) - sum(o is not None for o in outcomes[m]),
        ))
    return rows


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

CSV_FIELDS = [
    "method", "coverage", "coverage_se", "delta_length", "delta_length_se",
    "power", "power_se", "delta_rmse", "delta_rmse_se", "rmse", "mean_length", "reps", "failures",
]


def rows_to_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        d = r.to_dict()
        w.writerow({k: d[k] for k in CSV_FIELDS})
    return buf.getvalue()


def format_table(rows: Sequence[MetricsRow], pilot_n: int | None = None, main_n: int | None = None) -> str:
    """Aligned text table: coverage, %change in CI length, power, %change in RMSE (MC s.e. in brackets)."""
    head = f"{'Method':<18} {'Coverage':>14} {'%dLength':>14} {'Power':>14} {'%dRMSE':>14}"
    lines = []
    if pilot_n is not None:
        lines.append(f"pilot {pilot_n} / main {main_n}, {rows[0].reps} reps")
    lines += [head, "-" * len(head)]
    for r in rows:
        cells = [
            f"{v:6.1f} ({s:4.1f})"
            for v, s in (
                (r.coverage, r.coverage_se),
                (r.delta_length, r.delta_length_se),
                (r.power, r.power_se),
                (r.delta_rmse, r.delta_rmse_se),
            )
        ]
        lines.append(f"{LABELS.get(r.method, r.method):<18} " + " ".join(f"{c:>14}" for c in cells))
    return "\n".join(lines)
