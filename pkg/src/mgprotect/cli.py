"""Command-line front end: simulate, dataset, train, evaluate, replay, report.

Exit status is 0 on success, 2 for usage errors and the ``exit_code`` of the
raised :class:`~mgprotect.errors.MgProtectError` otherwise (3 configuration,
4 simulation, 5 model, 6 data).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cart import TrainConfig, deserialize, fit_dataset, serialize, tree_stats
from .config import ENV_CONFIG_DIR, load_config
from .errors import DataError, MgProtectError, SimulationError
from .faultlab import (FAULT_NAMES, BatchManifest, FaultScenario, LoadPolicy, ScenarioGrid,
                       enumerate_scenarios, run_batch, run_scenario)
from .features import (FEATURE_COLUMNS, FEATURE_SETS, FULL, FeatureSet, assemble_dataset,
                       export_csv, import_csv, split_dataset)
from .relay import (REFERENCE_LEAVES, TreePair, dumps_report, evaluate, file_digest, render_table,
                    replay_case)

log = logging.getLogger("mgprotect")

GRIDS = {
    "default": ScenarioGrid(),
    # one scenario per fault type, for smoke tests
    "quick": ScenarioGrid(types=(1, 2, 3, 4, 5, 6, 7), resistances=(1.0,), buses=(1,),
                          durations=(0.1,)),
}
MANIFEST = "manifest.json"
SCENARIOS = "scenarios.json"


def dataset_file(fs) -> str:
    return f"dataset_{FeatureSet(fs)}.csv"


def model_file(fs, target: str) -> str:
    return f"{FeatureSet(fs)}_{target}.tree"


def _feature_sets(text: str):
    if text.lower() == "all":
        return FEATURE_SETS
    return tuple(FeatureSet(tok) for tok in text.split("+"))


def _scenario_from_args(args) -> FaultScenario:
    code = args.type
    if not code.isdigit():
        names = {v: k for k, v in FAULT_NAMES.items()}
        if code.upper() not in names:
            raise DataError(f"unknown fault type {code!r}")
        code = names[code.upper()]
    return FaultScenario(int(code), args.bus, args.rf, args.start, args.duration,
                         args.load_p, args.load_q)


def _add_scenario_args(p):
    p.add_argument("--type", default="1", help="fault type 0-7 or name (AG, ACG, ABCG, ...)")
    p.add_argument("--bus", type=int, default=1)
    p.add_argument("--rf", type=float, default=1.0, help="fault resistance in ohm")
    p.add_argument("--start", type=float, default=0.05, help="fault inception in s")
    p.add_argument("--duration", type=float, default=0.1, help="fault duration in s")
    p.add_argument("--load-p", type=float, default=0.35)
    p.add_argument("--load-q", type=float, default=0.035)


def cmd_simulate(args) -> int:
    desc, roster, settings = load_config(args.config)
    scenario = _scenario_from_args(args)
    run = run_scenario(scenario, desc, roster, settings)
    if not run.ok:
        raise SimulationError(f"simulation failed at {run.diagnostics['failed_at_ms']} ms")
    X = np.column_stack([np.abs(run.i), np.abs(run.v), run.p, run.q])
    with Path(args.out).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(("t_ms",) + FEATURE_COLUMNS + ("fault_active",)) + "\n")
        for t, row, on in zip(run.t_ms, X, run.fault_active):
            fh.write(f"{t}," + ",".join(f"{v:.17g}" for v in row) + f",{int(on)}\n")
    d = run.diagnostics
    print(f"{scenario.label()}: {len(run)} samples -> {args.out}")
    print(f"max KCL residual {d['max_residual']:.3g} pu, "
          f"max inverter current {d['max_inverter_current']:.6f} pu")
    return 0


def cmd_dataset(args) -> int:
    desc, roster, settings = load_config(args.config)
    policy = LoadPolicy(args.load_mode, args.seed)
    scenarios = enumerate_scenarios(GRIDS[args.grid], policy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    runs, manifest = run_batch(scenarios, desc, roster, settings, parallelism=args.parallelism,
                               load_policy=policy)
    elapsed = time.perf_counter() - t0
    full = write_dataset(out, runs, manifest, scenarios)
    print(f"{len(runs)} scenarios simulated in {elapsed:.1f} s, {len(full)} rows -> {out}")
    return 0


def write_dataset(out, runs, manifest: BatchManifest, scenarios):
    """Write the four feature-set CSVs, the manifest and the scenario list; return the full dataset."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    full = assemble_dataset(runs)
    for fs in FEATURE_SETS:
        export_csv(full.project(fs), out / dataset_file(fs))
    manifest.write(out / MANIFEST)
    doc = [dict(index=k, type_code=s.type_code, bus=s.bus, rf=s.rf, t_start=s.t_start,
                duration=s.duration, load_p=s.load_p, load_q=s.load_q, seed=s.seed)
           for k, s in enumerate(scenarios)]
    (out / SCENARIOS).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return full


def _read_manifest(folder: Path) -> BatchManifest:
    path = folder / MANIFEST
    if not path.is_file():
        raise DataError(f"{path} not found; run 'dataset' first")
    return BatchManifest.read(path)


def _load_dataset(folder: Path, fs):
    manifest = _read_manifest(folder)
    path = folder / dataset_file(fs)
    if not path.is_file():
        raise DataError(f"{path} not found")
    return import_csv(path, provenance=manifest.hash)


def _load_scenarios(folder: Path):
    path = folder / SCENARIOS
    if not path.is_file():
        return None
    doc = json.loads(path.read_text(encoding="utf-8"))
    return [FaultScenario(d["type_code"], d["bus"], d["rf"], d["t_start"], d["duration"],
                          d["load_p"], d["load_q"], d["seed"]) for d in doc]


def cmd_train(args) -> int:
    src, out = Path(args.inp), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig(max_depth=args.max_depth, seed=args.seed)
    timing_path = out / "timing.json"
    timing = json.loads(timing_path.read_text()) if timing_path.is_file() else {}
    for fs in _feature_sets(args.features):
        ds = _load_dataset(src, fs)
        if len(ds) == 0:
            raise DataError(f"{dataset_file(fs)} holds no rows")
        train, _ = split_dataset(ds, args.train_fraction, args.seed)
        for target in ("detect", "type"):
            t0 = time.perf_counter()
            tree = fit_dataset(train, target, cfg)
            elapsed = time.perf_counter() - t0
            (out / model_file(fs, target)).write_text(serialize(tree), encoding="utf-8")
            st = tree_stats(tree)
            timing[f"{fs}_{target}"] = round(elapsed, 3)
            print(f"{fs.label:8s} {target:6s} trained in {elapsed:.2f} s on {len(train)} rows: "
                  f"depth {st.depth}, {st.n_leaves} leaves (reference {REFERENCE_LEAVES})")
    # wall-clock times live apart from the models so model files stay reproducible
    timing_path.write_text(json.dumps(timing, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return 0


def _load_pair(folder: Path, fs, provenance: str | None) -> TreePair | None:
    paths = [folder / model_file(fs, t) for t in ("detect", "type")]
    if not all(p.is_file() for p in paths):
        return None
    trees = [deserialize(p.read_text(encoding="utf-8"), provenance) for p in paths]
    return TreePair(*trees)


def cmd_evaluate(args) -> int:
    src, models = Path(args.inp), Path(args.models)
    manifest = _read_manifest(src)
    pairs, vals, model_hashes = {}, {}, {}
    full = None
    for fs in _feature_sets(args.features):
        pair = _load_pair(models, fs, manifest.hash)
        if pair is None:
            continue
        ds = _load_dataset(src, fs)
        if len(ds) == 0:
            raise DataError(f"{dataset_file(fs)} holds no rows")
        _, val = split_dataset(ds, args.train_fraction, args.seed)
        pairs[fs], vals[fs] = pair, val
        for t in ("detect", "type"):
            model_hashes[model_file(fs, t)] = file_digest(models / model_file(fs, t))
        if fs == FULL:
            full = ds
    if not pairs:
        raise DataError(f"no model files found in {models}")
    debounce = (args.debounce_k, args.debounce_n) if args.debounce else None
    replay_set = FULL if FULL in pairs else next(iter(pairs))
    if full is None:
        full = _load_dataset(src, replay_set)
    report = evaluate(pairs, vals, full, _load_scenarios(src), replay_set, debounce,
                      provenance={"dataset": manifest.hash, "models": model_hashes})
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    if args.table:
        Path(args.table).write_text(report.table(), encoding="utf-8")
    print(report.table(), end="")
    return 0


def cmd_replay(args) -> int:
    desc, roster, settings = load_config(args.config)
    scenario = _scenario_from_args(args)
    pair = _load_pair(Path(args.models), FeatureSet(args.features), None)
    if pair is None:
        raise DataError(f"no {args.features} model files in {args.models}")
    rep = replay_case(scenario, pair, desc, roster, settings)
    if args.out:
        rep.to_csv(args.out)
    fmt = lambda v: "-" if v is None else f"{v} ms"  # noqa: E731
    print(f"{scenario.label()}")
    print(f"inception delay {fmt(rep.inception_delay)}, clearance delay {fmt(rep.clearance_delay)}, "
          f"type settles after {fmt(rep.type_settle_ms())}, "
          f"{len(rep.misclassified_ms)} misclassified samples")
    return 0


def cmd_report(args) -> int:
    path = Path(args.inp)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read report {path}: {exc}") from None
    if args.json:
        print(dumps_report(doc), end="")
    else:
        print(render_table(doc), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgprotect", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    cfg_help = f"network INI file (default: ${ENV_CONFIG_DIR}/microgrid.ini or built-in)"

    s = sub.add_parser("simulate", help="simulate one scenario to a raw CSV")
    _add_scenario_args(s)
    s.add_argument("--config", help=cfg_help)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("dataset", help="simulate a scenario grid into feature-set CSVs")
    s.add_argument("--grid", choices=sorted(GRIDS), default="default")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help=cfg_help)
    s.add_argument("--parallelism", type=int, default=1)
    s.add_argument("--load-mode", choices=("uniform", "fixed"), default="uniform")
    s.add_argument("--seed", type=int, default=20, help="master seed of the load draws")
    s.set_defaults(func=cmd_dataset)

    for name, func, helptext in (("train", cmd_train, "fit detection and type trees"),
                                 ("evaluate", cmd_evaluate, "score trees on the validation split")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--features", default="IVPQ", help="I, IV, IPQ, IVPQ, 'I+IVPQ' or 'all'")
        s.add_argument("--in", dest="inp", required=True, help="dataset directory")
        s.add_argument("--seed", type=int, default=20, help="split seed")
        s.add_argument("--train-fraction", type=float, default=0.8)
        s.set_defaults(func=func)
        if name == "train":
            s.add_argument("--out", required=True, help="model directory")
            s.add_argument("--max-depth", type=int, default=43)
        else:
            s.add_argument("--models", required=True, help="model directory")
            s.add_argument("--out", help="JSON report path")
            s.add_argument("--table", help="text table path")
            s.add_argument("--debounce", action="store_true",
                           help="also count transitions after a k-of-n debounce")
            s.add_argument("--debounce-k", type=int, default=2)
            s.add_argument("--debounce-n", type=int, default=3)

    s = sub.add_parser("replay", help="simulate one scenario and stream it through the trees")
    _add_scenario_args(s)
    s.add_argument("--models", required=True)
    s.add_argument("--features", default="IVPQ")
    s.add_argument("--config", help=cfg_help)
    s.add_argument("--out", help="plot-ready CSV path")
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("report", help="render a JSON report as a table")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--json", action="store_true", help="print canonical JSON instead")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MgProtectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
