from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from strattree import CovariateSpace, Sample, StratificationTree, estimate_ate, estimate_pooled
from strattree.cli import main

X8 = [0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9]
A8 = [0, 1] * 4
Y8 = [1, 3, 2, 6, 0, 5, 1, 9]
FAST = ["--population", "20", "--max-iterations", "60", "--patience", "20"]


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return str(path)


@pytest.fixture
def pilot8(tmp_path):
    return write_csv(tmp_path / "pilot.csv", ["y", "a", "x1"], zip(Y8, A8, X8))


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_fit_finds_hand_optimum(pilot8, tmp_path, capsys):
    report = tmp_path / "rep.json"
    code, out, _ = run(["fit", pilot8, "--depth", "1", "--bounds", "unit", "--seed", "1", "--report", str(report), *FAST], capsys)
    assert code == 0
    tree = json.loads(out)
    assert tree["root"]["cut"] == {"dim": 0, "threshold": 0.5}
    assert tree["root"]["left"]["pi"] == [0.75] and tree["root"]["right"]["pi"] == [0.8]
    # 131/16 worked out by hand in the objective tests
    assert json.loads(report.read_text())["objective"] == pytest.approx(131 / 16, rel=1e-12)


def test_depth_zero_gives_neyman_variance(pilot8, capsys):
    code, out, _ = run(["oracle", pilot8, "--depth", "0", "--bounds", "unit"], capsys)
    assert code == 0
    y, a = np.array(Y8, float), np.array(A8)
    s1, s0 = y[a == 1].std(), y[a == 0].std()
    # the Neyman share is interior here, so the value is (s1 + s0)^2
    assert 0.1 < s1 / (s1 + s0) < 0.9
    assert json.loads(out)["objective"] == pytest.approx((s1 + s0) ** 2, rel=1e-12)


def test_fit_is_reproducible(pilot8, tmp_path, capsys):
    outs = []
    for name in ("a.json", "b.json"):
        path = tmp_path / name
        assert run(["fit", pilot8, "--depth", "1", "--seed", "7", "-o", str(path), *FAST], capsys)[0] == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_oracle_and_cv_fit(pilot8, capsys):
    code, out, _ = run(["oracle", pilot8, "--depth", "1", "--bounds", "unit"], capsys)
    assert code == 0 and json.loads(out)["objective"] == pytest.approx(131 / 16)
    code, out, _ = run(["cv-fit", pilot8, "--depth", "1", "--bounds", "unit", "--seed", "2", "--min-cell", "1", *FAST], capsys)
    assert code == 0 and json.loads(out)["depth"] in (0, 1)


def test_assign_then_estimate(tmp_path, capsys):
    rng = np.random.default_rng(0)
    m = 120
    px = rng.random(m)
    pa = rng.permutation(np.arange(m) % 2)
    py = px + pa * (1 + 2 * px) + rng.normal(0, 0.3, m)
    pilot = write_csv(tmp_path / "pilot.csv", ["y", "a", "x1"], zip(py, pa, px))
    tree_path = tmp_path / "tree.json"
    assert run(["fit", pilot, "--depth", "2", "--bounds", "unit", "--seed", "3", "-o", str(tree_path), *FAST], capsys)[0] == 0

    n = 400
    x = rng.random(n)
    cov = write_csv(tmp_path / "cov.csv", ["x1"], ([v] for v in x))
    plan_path = tmp_path / "plan.csv"
    summary = tmp_path / "summary.json"
    code, _, _ = run(["assign", str(tree_path), cov, "--seed", "5", "-o", str(plan_path), "--summary", str(summary)], capsys)
    assert code == 0
    with open(plan_path) as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["x1"]) for r in rows] == list(x)
    a = np.array([int(r["treatment"]) for r in rows])
    assert json.loads(summary.read_text())["schema"] == "strattree/assignment@1"

    y = x + a * (1 + 2 * x) + rng.normal(0, 0.3, n)
    data = write_csv(tmp_path / "wave.csv", ["y", "a", "x1"], zip(y, a, x))
    tree = StratificationTree.from_dict(json.loads(tree_path.read_text()))
    wave = Sample(y, a, x.reshape(-1, 1))

    code, out, _ = run(["estimate", str(tree_path), data], capsys)
    assert code == 0
    got, want = json.loads(out), estimate_ate(tree, wave)
    assert got["theta"] == pytest.approx(want.theta_hat, rel=1e-12)
    assert got["v_hat"] == pytest.approx(want.v_hat, rel=1e-12)

    code, out, _ = run(["estimate", str(tree_path), data, "--pilot", pilot], capsys)
    assert code == 0
    psample = Sample(py, pa, px.reshape(-1, 1))
    pooled = estimate_pooled(estimate_ate(StratificationTree.trivial(CovariateSpace.unit_cube(1)), psample), want)
    assert json.loads(out)["theta"] == pytest.approx(pooled.theta_hat, rel=1e-12)


def test_simulate_table_and_csv(capsys):
    code, out, _ = run(["simulate", "--model", "1", "--reps", "2", "--pilot", "100", "--main", "300", "--seed", "1", "--population", "20", "--max-iterations", "30", "--patience", "10"], capsys)
    assert code == 0
    csv_part = out[out.index("method,"):].strip().splitlines()
    assert len(csv_part) == 6
    assert {line.split(",")[0] for line in csv_part[1:]} == {"none", "adhoc", "strat_tree", "cv_tree", "infeasible"}


@pytest.mark.parametrize(
    "header,rows,needle",
    [
        (["y", "a", "x1"], [[1, 0, 0.1], [2, 1, ""]], "missing value"),
        (["y", "a", "x1"], [[1, 0, 0.1], [2, "b", 0.2]], "row 3"),
        (["y", "a", "x2"], [[1, 0, 0.1]], "x1"),
        (["y", "a", "x1"], [[1, 0, 0.1], [2, 1]], "row 3"),
    ],
)
def test_bad_input_exits_two(tmp_path, capsys, header, rows, needle):
    path = write_csv(tmp_path / "bad.csv", header, rows)
    code, _, err = run(["fit", path, "--depth", "1"], capsys)
    assert code == 2 and needle in err


def test_missing_file(tmp_path, capsys):
    code, _, err = run(["fit", str(tmp_path / "nope.csv")], capsys)
    assert code == 2 and "cannot read" in err


def test_entry_point(pilot8):
    proc = subprocess.run([sys.executable, "-m", "strattree.cli", "oracle", pilot8, "--depth", "1", "--bounds", "unit"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["objective"] == pytest.approx(131 / 16)
