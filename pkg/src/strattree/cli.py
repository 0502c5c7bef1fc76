"""Command-line front end: ``strattree fit | cv-fit | assign | estimate | simulate | oracle``.

Data files are CSV with a header. Fitting and estimation read columns ``y``,
``a`` (arm, 0 is control) and ``x1..xd``; assignment reads only the
covariates and writes them back with ``stratum`` and ``treatment`` appended.
Every JSON artifact records its schema, the package version, the resolved
configuration and the seed, and is written with sorted keys so re-running a
command reproduces it byte for byte.

Exit codes: 0 success, 1 internal error, 2 bad input or configuration.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .assign import assign_sbr, assign_simple
from .core import CovariateSpace, Dimension, FitConfig, Sample, StratificationTree, StratTreeError
from .cv import cv_fit
from .estimate import EstimationError, estimate_ate, estimate_ate_sfe, estimate_pooled
from .multi import EOptimalObjective, estimate_ate_multi
from .search import exhaustive_search, fit
from .sim import METHODS, SIM_EA, format_table, model, rows_to_csv, run_study

log = logging.getLogger("strattree")

MISSING = {"", "na", "nan", "null", "none"}


class InputError(Exception):
    """Malformed user input; reported with exit code 2."""


# ---------------------------------------------------------------------------
# CSV input
# ---------------------------------------------------------------------------


def _x_columns(header: list[str], path) -> list[int]:
    xs = {}
    for i, name in enumerate(header):
        if name.startswith("x") and name[1:].isdigit():
            xs[int(name[1:])] = i
    if not xs:
        raise InputError(f"{path}: header has no covariate columns x1..xd")
    d = max(xs)
    missing = [f"x{j}" for j in range(1, d + 1) if j not in xs]
    if missing:
        raise InputError(f"{path}: covariate columns must be x1..x{d}; missing {', '.join(missing)}")
    return [xs[j] for j in range(1, d + 1)]


def read_table(path, need_outcomes: bool = True) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Parse a data CSV into ``(x, y, a)``; ``y`` and ``a`` are None when not needed."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: file is empty")
        header = [h.strip() for h in header]
        dup = sorted({h for h in header if header.count(h) > 1})
        if dup:
            raise InputError(f"{path}: duplicate column(s) {', '.join(dup)}")
        cols = _x_columns(header, path)
        if need_outcomes:
            for name in ("y", "a"):
                if name not in header:
                    raise InputError(f"{path}: required column '{name}' is missing from the header")
            cols = [header.index("y"), header.index("a")] + cols
        names = [header[c] for c in cols]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not v.strip() for v in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}: row {lineno} has {len(row)} fields, header has {len(header)}")
            values = []
            for c, name in zip(cols, names):
                text = row[c].strip()
                if text.lower() in MISSING:
                    raise InputError(f"{path}: row {lineno}, column '{name}': missing value")
                try:
                    v = float(text)
                except ValueError:
                    raise InputError(f"{path}: row {lineno}, column '{name}': cannot parse {text!r} as a number") from None
                if not math.isfinite(v):
                    raise InputError(f"{path}: row {lineno}, column '{name}': value must be finite")
                if name == "a" and v != int(v):
                    raise InputError(f"{path}: row {lineno}, column 'a': arm must be an integer, got {text!r}")
                values.append(v)
            rows.append(values)
    if not rows:
        raise InputError(f"{path}: no data rows")
    data = np.array(rows, dtype=float)
    if need_outcomes:
        return data[:, 2:], data[:, 0], data[:, 1].astype(np.int64)
    return data, None, None


def read_sample(path, arms: int | None = None) -> Sample:
    x, y, a = read_table(path)
    try:
        sample = Sample(y, a, x)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    if arms is not None and sample.n_arms != arms + 1:
        raise InputError(f"{path}: expected arms 0..{arms} (--arms {arms}), found 0..{sample.n_arms - 1}")
    return sample


def read_tree(path) -> tuple[StratificationTree, dict]:
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from None
    if isinstance(payload, dict) and "tree" in payload and "root" not in payload:
        payload = payload["tree"]
    try:
        return StratificationTree.from_dict(payload), payload
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: not a stratification tree ({exc})") from None


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _dumps(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _emit(text: str, path) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _envelope(payload: dict, command: str, seed, config: dict, inputs: dict) -> dict:
    out = dict(payload)
    out.update(version=__version__, command=command, seed=seed, config=config, inputs=inputs)
    return out


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _space(spec: str | None, x: np.ndarray) -> CovariateSpace:
    """``data`` (bounding box), ``unit`` or ``LO:HI`` applied to every covariate."""
    d = x.shape[1]
    if spec in (None, "data"):
        return CovariateSpace.bounding(x)
    if spec == "unit":
        return CovariateSpace.unit_cube(d)
    try:
        lo, hi = (float(v) for v in spec.split(":"))
        return CovariateSpace(tuple(Dimension(lo, hi) for _ in range(d)))
    except ValueError:
        raise InputError(f"--bounds must be 'data', 'unit' or LO:HI, got {spec!r}") from None


def _fit_config(args, depth: int | None = None) -> FitConfig:
    return FitConfig(
        max_depth=args.depth if depth is None else depth,
        nu=args.nu,
        min_cell_per_arm=args.min_cell,
    ).replace(
        population=args.population,
        max_iterations=args.max_iterations,
        patience=args.patience,
        tolerance=args.tolerance,
        seed=args.seed,
    )


def _run_config(args, fit_config: FitConfig | None = None, **extra) -> dict:
    # the thread count is left out: it never changes a result
    out = {"arms": getattr(args, "arms", 1)}
    if fit_config is not None:
        out["fit"] = fit_config.to_dict()
    if hasattr(args, "bounds"):
        out["bounds"] = args.bounds
    out.update(extra)
    return out


def _threads(args) -> int:
    t = getattr(args, "threads", None)
    return int(t) if t else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    pilot = read_sample(args.pilot, args.arms)
    config = _fit_config(args)
    space = _space(args.bounds, pilot.x)
    objective = EOptimalObjective(pilot, config) if args.arms > 1 else None
    report = fit(pilot, config, space, objective)
    inputs = {"pilot": _digest(args.pilot)}
    run = _run_config(args, config)
    _emit(_dumps(_envelope(report.tree.to_dict(), "fit", args.seed, run, inputs)), args.out)
    if args.report:
        _emit(_dumps(_envelope(report.to_dict(), "fit", args.seed, run, inputs)), args.report)
    if report.warning:
        print(f"warning: {report.warning}", file=sys.stderr)
    return 0


def cmd_cv_fit(args) -> int:
    pilot = read_sample(args.pilot, args.arms)
    if args.arms != 1:
        raise InputError("cv-fit supports a single treatment arm (--arms 1)")
    config = _fit_config(args).replace(folds=args.folds)
    space = _space(args.bounds, pilot.x)
    tree, report = cv_fit(pilot, args.depth, config, space)
    inputs = {"pilot": _digest(args.pilot)}
    run = _run_config(args, config)
    _emit(_dumps(_envelope(tree.to_dict(), "cv-fit", args.seed, run, inputs)), args.out)
    if args.report:
        _emit(_dumps(_envelope(report.to_dict(), "cv-fit", args.seed, run, inputs)), args.report)
    return 0


def cmd_assign(args) -> int:
    tree, _ = read_tree(args.tree)
    x, _, _ = read_table(args.covariates, need_outcomes=False)
    if x.shape[1] != tree.space.d:
        raise InputError(f"{args.covariates}: tree uses {tree.space.d} covariates, file has {x.shape[1]}")
    procedure = assign_simple if args.simple else assign_sbr
    plan = procedure(tree, x, args.seed)
    d = x.shape[1]
    lines = [",".join([f"x{j + 1}" for j in range(d)] + ["stratum", "treatment"])]
    for row, s, t in zip(x, plan.strata, plan.treatment):
        lines.append(",".join([repr(float(v)) for v in row] + [str(int(s)), str(int(t))]))
    _emit("\n".join(lines) + "\n", args.out)
    if args.summary:
        payload = {
            "schema": "strattree/assignment@1",
            "procedure": plan.procedure,
            "n": plan.n,
            "strata": [
                {"stratum": int(k), "counts": [int(c) for c in row]} for k, row in zip(plan.labels, plan.counts)
            ],
        }
        inputs = {"tree": _digest(args.tree), "covariates": _digest(args.covariates)}
        _emit(_dumps(_envelope(payload, "assign", args.seed, _run_config(args, procedure=plan.procedure), inputs)), args.summary)
    return 0


def cmd_estimate(args) -> int:
    tree, _ = read_tree(args.tree)
    wave = read_sample(args.data)
    if wave.d != tree.space.d:
        raise InputError(f"{args.data}: tree uses {tree.space.d} covariates, file has {wave.d}")
    inputs = {"tree": _digest(args.tree), "data": _digest(args.data)}
    if wave.n_arms > 2:
        if args.pilot or args.sfe:
            raise InputError("--pilot and --sfe apply to a single treatment arm only")
        result = estimate_ate_multi(tree, wave, args.level)
        payload = result.to_dict()
        text = None
    else:
        result = (estimate_ate_sfe if args.sfe else estimate_ate)(tree, wave, args.level)
        if args.pilot:
            pilot = read_sample(args.pilot, 1)
            pilot_result = estimate_ate(StratificationTree.trivial(CovariateSpace.bounding(pilot.x)), pilot, args.level)
            result = estimate_pooled(pilot_result, result, args.level)
            inputs["pilot"] = _digest(args.pilot)
        payload = result.to_dict()
        text = result.table()
    run = {"level": args.level, "method": payload.get("method", "stratified"), "pooled": bool(args.pilot)}
    _emit(_dumps(_envelope(payload, "estimate", None, run, inputs)), args.out)
    if text is not None and args.out not in (None, "-"):
        print(text)
    return 0


def cmd_simulate(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    kappa0 = args.kappa0
    try:
        kappa0 = float(kappa0)
    except ValueError:
        pass
    dgp = model(args.model, kappa0)
    config = FitConfig(max_depth=args.depth, nu=args.nu, ea=SIM_EA).replace(
        population=args.population or SIM_EA.population,
        max_iterations=args.max_iterations or SIM_EA.max_iterations,
        patience=args.patience or SIM_EA.patience,
    )
    progress = None
    if args.progress:
        def progress(r):
            print(f"\rrep {r}/{args.reps}", end="", file=sys.stderr, flush=True)

    result = run_study(
        dgp, methods, args.pilot_n, args.main_n, args.reps, args.level, args.seed, config,
        progress=progress, workers=_threads(args),
    )
    if progress:
        print(file=sys.stderr)
    print(format_table(result.rows, args.pilot_n, args.main_n))
    text = rows_to_csv(result.rows)
    if args.out:
        _emit(text, args.out)
    else:
        print()
        sys.stdout.write(text)
    if args.json:
        payload = {
            "schema": "strattree/study@1",
            "model": args.model,
            "true_ate": dgp.true_ate,
            "kappa0": dgp.kappa0,
            "rows": [r.to_dict() for r in result.rows],
            "depths": result.depths,
        }
        run = _run_config(args, config, model=args.model, reps=args.reps, pilot_n=args.pilot_n,
                          main_n=args.main_n, level=args.level, methods=methods, kappa0=args.kappa0)
        _emit(_dumps(_envelope(payload, "simulate", args.seed, run, {})), args.json)
    return 0


def cmd_oracle(args) -> int:
    pilot = read_sample(args.pilot, args.arms)
    config = _fit_config(args)
    space = _space(args.bounds, pilot.x)
    objective = EOptimalObjective(pilot, config) if args.arms > 1 else None
    tree, value = exhaustive_search(pilot, args.depth, None, config, space, args.budget, objective)
    payload = tree.to_dict()
    payload["objective"] = value if math.isfinite(value) else None
    run = _run_config(args, config, budget=args.budget)
    _emit(_dumps(_envelope(payload, "oracle", args.seed, run, {"pilot": _digest(args.pilot)})), args.out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common(p, seed=True):
    if seed:
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="worker count (default: all CPUs); results do not depend on it")
    p.add_argument("-v", "--verbose", action="store_true")


def _fit_options(p, depth_help="depth budget L"):
    p.add_argument("pilot", help="pilot CSV with columns y, a, x1..xd")
    p.add_argument("--depth", type=int, default=2, help=f"{depth_help} (default 2)")
    p.add_argument("--arms", type=int, default=1, help="number of treatment arms J (default 1)")
    p.add_argument("--nu", type=float, default=0.1, help="bound on assignment targets (default 0.1)")
    p.add_argument("--min-cell", type=int, default=2, help="minimum pilot units per arm and stratum (default 2)")
    p.add_argument("--bounds", default="data", help="covariate support: data, unit or LO:HI (default data)")
    p.add_argument("--population", type=int, default=500)
    p.add_argument("--max-iterations", type=int, default=2000)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("-o", "--out", default=None, help="tree JSON (default stdout)")
    _common(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strattree", description="Stratification trees for two-wave experiments.")
    parser.add_argument("--version", action="version", version=f"strattree {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a tree to pilot data with the evolutionary search")
    _fit_options(p)
    p.add_argument("--report", default=None, help="write the fit report JSON here")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cv-fit", help="choose the depth by cross-validation, then fit")
    _fit_options(p, "largest depth considered")
    p.add_argument("--folds", type=int, default=2)
    p.add_argument("--report", default=None, help="write the cross-validation report JSON here")
    p.set_defaults(func=cmd_cv_fit)

    p = sub.add_parser("assign", help="randomize a second wave within the strata of a tree")
    p.add_argument("tree", help="tree JSON")
    p.add_argument("covariates", help="CSV with columns x1..xd")
    p.add_argument("--simple", action="store_true", help="independent draws instead of stratified block randomization")
    p.add_argument("-o", "--out", default=None, help="assignment CSV (default stdout)")
    p.add_argument("--summary", default=None, help="write per-stratum counts JSON here")
    _common(p)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("estimate", help="estimate the average effect from second-wave data")
    p.add_argument("tree", help="tree JSON")
    p.add_argument("data", help="second-wave CSV with columns y, a, x1..xd")
    p.add_argument("--pilot", default=None, help="pilot CSV; pool it with the second wave")
    p.add_argument("--sfe", action="store_true", help="strata fixed effects regression")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("-o", "--out", default=None, help="estimate JSON (default stdout)")
    _common(p, seed=False)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="Monte Carlo comparison of stratification methods")
    p.add_argument("--model", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--pilot-n", "--pilot", dest="pilot_n", type=int, default=500)
    p.add_argument("--main-n", "--main", dest="main_n", type=int, default=4500)
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--nu", type=float, default=0.1)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--kappa0", default="calibrated", help="calibrated, nominal or a number")
    p.add_argument("--population", type=int, default=None)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("-o", "--out", default=None, help="metrics CSV (default stdout, after the table)")
    p.add_argument("--json", default=None, help="write the study JSON here")
    p.add_argument("--progress", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle", help="exact minimiser by exhaustive search (small problems only)")
    _fit_options(p)
    p.add_argument("--budget", type=int, default=1_000_000, help="refuse when more trees than this")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, StratTreeError, EstimationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
