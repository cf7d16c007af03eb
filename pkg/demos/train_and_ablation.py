"""Build a dataset, train detection and type trees per feature set, compare.

``python demos/train_and_ablation.py`` runs the full 420-scenario grid
(several minutes); add ``--quick`` for a 28-scenario grid that finishes in
seconds.  Prints an accuracy table shaped like the relay report.
"""

from __future__ import annotations

import sys
import time

from mgprotect.cart import TrainConfig, fit_dataset
from mgprotect.faultlab import ScenarioGrid, enumerate_scenarios, run_batch
from mgprotect.features import FEATURE_SETS, assemble_dataset, split_dataset
from mgprotect.relay import EvalReport, TreePair, evaluate_pair

grid = ScenarioGrid()
if "--quick" in sys.argv:
    grid = ScenarioGrid(resistances=(10.0, 0.1), buses=(1, 3), durations=(0.1,))

scenarios = enumerate_scenarios(grid)
t0 = time.perf_counter()
runs, manifest = run_batch(scenarios)
full = assemble_dataset(runs)
print(f"{len(scenarios)} scenarios, {len(full)} rows in {time.perf_counter() - t0:.1f} s")

scores = {}
for fs in FEATURE_SETS:
    train, val = split_dataset(full.project(fs), 0.8, 20)
    t0 = time.perf_counter()
    pair = TreePair(fit_dataset(train, "detect", TrainConfig()),
                    fit_dataset(train, "type", TrainConfig()))
    print(f"{fs.label:8s} trained in {time.perf_counter() - t0:.2f} s")
    scores[fs] = evaluate_pair(pair, val)

print()
print(EvalReport(scores).table(), end="")
