"""A short Monte Carlo comparison on Model 1 (the full tables take hours)."""

from __future__ import annotations

from strattree.sim import format_table, model, run_study

res = run_study(model(1), reps=20, pilot_n=500, main_n=4500, seed=0, workers=None,
                progress=lambda r: print(f"\rrep {r}", end="", flush=True))
print()
print(format_table(res.rows, 500, 4500))
print("depths picked by cross-validation:", res.depths["cv_tree"])
