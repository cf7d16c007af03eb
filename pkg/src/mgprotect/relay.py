"""Relay evaluation: accuracy tables, per-case replays, delays and reports.

A relay is a pair of trees, one for detection (0/1) and one for the fault
type (0-7), trained on the same feature set.  Decisions are taken once per
1 ms sample with no filtering unless a k-of-n debounce is asked for.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .cart import Tree, tree_stats
from .errors import DataError, ModelError
from .features import FEATURE_SETS, Dataset, FeatureSet, extract_features
from .faultlab import FaultScenario, run_scenario

REFERENCE_LEAVES = 4044
DELAY_CLAIM_MS = 5
TRAINED_RESISTANCES = (100.0, 10.0, 1.0, 0.1, 0.001)
REPORT_FORMAT = "mgprotect-report/1"


class TreePair(NamedTuple):
    detect: Tree
    type: Tree

    @property
    def feature_set(self) -> FeatureSet:
        return feature_set_of(self.detect)


def feature_set_of(tree: Tree) -> FeatureSet:
    for fs in FEATURE_SETS:
        if fs.columns == tuple(tree.feature_names):
            return fs
    raise ModelError(f"tree features {','.join(tree.feature_names)} match no feature set")


def _check_pair(pair: TreePair, ds: Dataset) -> None:
    if tuple(pair.detect.feature_names) != tuple(pair.type.feature_names):
        raise ModelError("detection and type trees use different features")
    if tuple(pair.detect.feature_names) != ds.columns:
        raise ModelError(f"trees expect features {','.join(pair.detect.feature_names)}, "
                         f"dataset has {','.join(ds.columns)}")


def confusion_matrix(true, pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    return np.bincount(true * n_classes + pred, minlength=n_classes**2).reshape(n_classes, n_classes)


def accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise DataError("accuracy of an empty validation set")
    return 100.0 * float(np.trace(cm)) / float(total)


@dataclass
class FeatureSetScore:
    feature_set: FeatureSet
    detect_accuracy: float
    type_accuracy: float
    detect_confusion: np.ndarray
    type_confusion: np.ndarray
    detect_depth: int
    detect_leaves: int
    type_depth: int
    type_leaves: int


@dataclass
class CaseReplay:
    """Per-ms decisions of one scenario next to its true labels.

    Delays are in ms, ``None`` when the relevant transition never happens.
    """

    scenario: FaultScenario | None
    scenario_id: int
    t_ms: np.ndarray
    pred_detect: np.ndarray
    pred_type: np.ndarray
    true_detect: np.ndarray
    true_type: np.ndarray
    t_start_ms: int | None
    t_end_ms: int | None
    inception_delay: int | None
    clearance_delay: int | None
    misclassified_ms: np.ndarray

    @property
    def is_fault(self) -> bool:
        return self.t_start_ms is not None

    @property
    def detected(self) -> bool:
        """A positive decision inside the fault window."""
        return (self.inception_delay is not None
                and self.inception_delay < self.t_end_ms - self.t_start_ms)

    def chatter(self, debounce: tuple[int, int] | None = None) -> dict:
        pred = self.pred_detect if debounce is None else k_of_n(self.pred_detect, *debounce)
        return transition_counts(pred)

    def type_settle_ms(self, type_code: int | None = None) -> int | None:
        """Time after inception from which the type trace equals ``type_code`` to the window end."""
        if not self.is_fault:
            return None
        code = self.true_type[self.t_ms == self.t_start_ms][0] if type_code is None else type_code
        inside = (self.t_ms >= self.t_start_ms) & (self.t_ms < self.t_end_ms)
        wrong = self.t_ms[inside & (self.pred_type != code)]
        if wrong.size == 0:
            return 0
        last = int(wrong.max())
        if last == self.t_end_ms - 1:
            return None
        return last + 1 - self.t_start_ms

    def to_csv(self, path) -> None:
        """Plot-ready trace: one line per ms."""
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("t_ms", "true_detect", "pred_detect", "true_type", "pred_type"))
            for row in zip(self.t_ms, self.true_detect, self.pred_detect, self.true_type,
                           self.pred_type):
                w.writerow(int(v) for v in row)


def k_of_n(pred, k: int = 2, n: int = 3) -> np.ndarray:
    """Causal debounce: the output flips once ``k`` of the last ``n`` raw decisions disagree with it.

    ``k`` must be a strict majority of ``n``; otherwise a window can hold
    enough ones and zeros to flip both ways and the output chatters.
    """
    if not n / 2 < k <= n:
        raise DataError(f"debounce needs n/2 < k <= n, got {k}-of-{n}")
    pred = np.asarray(pred, dtype=np.int64)
    out = np.zeros_like(pred)
    state = 0
    for t in range(len(pred)):
        ones = int(pred[max(0, t - n + 1):t + 1].sum())
        window = min(n, t + 1)
        if state == 0 and ones >= k:
            state = 1
        elif state == 1 and window - ones >= k:
            state = 0
        out[t] = state
    return out


def transition_counts(pred) -> dict:
    pred = np.asarray(pred, dtype=np.int64)
    step = np.diff(pred)
    return {"pickups": int(np.sum(step > 0)), "dropouts": int(np.sum(step < 0))}


def _first_at_or_after(t_ms, mask, t0):
    hits = t_ms[mask & (t_ms >= t0)]
    return int(hits.min()) - t0 if hits.size else None


def replay_rows(ds: Dataset, pair: TreePair, scenario: FaultScenario | None = None) -> CaseReplay:
    """Stream the rows of one scenario through the trees in time order.

    The fault window comes from ``scenario`` when given, otherwise from the
    rows' true labels.
    """
    _check_pair(pair, ds)
    ids = np.unique(ds.scenario_id)
    if len(ids) != 1:
        raise DataError(f"replay needs the rows of exactly one scenario, got {len(ids)}")
    order = np.argsort(ds.t_ms, kind="stable")
    ds = ds.take(order)
    # trees carry no state between samples, so one batch call gives the same decisions
    pred_detect = pair.detect.predict(ds.X)
    pred_type = pair.type.predict(ds.X)
    t = ds.t_ms
    if scenario is not None and scenario.type_code:
        t_start = int(round(scenario.t_start * 1e3))
        t_end = int(round((scenario.t_start + scenario.duration) * 1e3))
    elif scenario is None and ds.label_detect.any():
        on = t[ds.label_detect == 1]
        t_start, t_end = int(on.min()), int(on.max()) + 1
    else:
        t_start = t_end = None
    inception = clearance = None
    if t_start is not None:
        inception = _first_at_or_after(t, pred_detect == 1, t_start)
        clearance = _first_at_or_after(t, pred_detect == 0, t_end)
    wrong = (pred_detect != ds.label_detect) | (pred_type != ds.label_type)
    return CaseReplay(scenario, int(ids[0]), t, pred_detect, pred_type, ds.label_detect,
                      ds.label_type, t_start, t_end, inception, clearance, t[wrong])


def replay_case(scenario: FaultScenario, pair: TreePair, desc=None, roster=None,
                settings=None) -> CaseReplay:
    """Simulate ``scenario`` and replay it through ``pair``."""
    run = run_scenario(scenario, desc, roster, settings)
    ds = extract_features(run).project(pair.feature_set)
    return replay_rows(ds, pair, scenario)


def replay_dataset(ds: Dataset, pair: TreePair, scenarios=None) -> list[CaseReplay]:
    """One replay per scenario present in ``ds``, ordered by scenario id."""
    out = []
    order = np.argsort(ds.scenario_id, kind="stable")
    ids, starts = np.unique(ds.scenario_id[order], return_index=True)
    bounds = list(starts[1:]) + [len(order)]
    for sid, lo, hi in zip(ids, starts, bounds):
        scen = scenarios[int(sid)] if scenarios is not None else None
        out.append(replay_rows(ds.take(order[lo:hi]), pair, scen))
    return out


def evaluate_pair(pair: TreePair, validation: Dataset) -> FeatureSetScore:
    if len(validation) == 0:
        raise DataError("validation dataset is empty")
    _check_pair(pair, validation)
    cm_d = confusion_matrix(validation.label_detect, pair.detect.predict(validation.X),
                            pair.detect.n_classes)
    cm_t = confusion_matrix(validation.label_type, pair.type.predict(validation.X),
                            pair.type.n_classes)
    sd, st = tree_stats(pair.detect), tree_stats(pair.type)
    return FeatureSetScore(validation.feature_set, accuracy(cm_d), accuracy(cm_t), cm_d, cm_t,
                           sd.depth, sd.n_leaves, st.depth, st.n_leaves)


def detection_delay_summary(replays, trained=TRAINED_RESISTANCES,
                            claim_ms: int = DELAY_CLAIM_MS) -> dict:
    """Median and maximum inception delay per fault resistance.

    Keys are resistances formatted with ``%g``.  ``violations`` lists the ids
    of trained-resistance faults detected later than ``claim_ms``; faults
    never detected inside their window are counted as ``missed``.
    """
    replays = [r for r in replays if r.is_fault]
    if not replays:
        raise DataError("delay summary needs at least one fault replay")
    buckets: dict[float, list] = {}
    for r in replays:
        rf = r.scenario.rf if r.scenario is not None else float("nan")
        buckets.setdefault(rf, []).append(r)
    trained = {float(x) for x in trained}
    out = {}
    for rf in sorted(buckets, key=lambda x: (np.isnan(x), -x if not np.isnan(x) else 0)):
        group = buckets[rf]
        delays = np.array([r.inception_delay for r in group if r.detected], dtype=np.int64)
        entry = {
            "n": len(group),
            "detected": int(delays.size),
            "missed": [r.scenario_id for r in group if not r.detected],
            "median_ms": float(np.median(delays)) if delays.size else None,
            "max_ms": int(delays.max()) if delays.size else None,
            "trained": rf in trained,
            "violations": [],
        }
        if rf in trained:
            entry["violations"] = [r.scenario_id for r in group
                                   if r.detected and r.inception_delay > claim_ms]
        out["unknown" if np.isnan(rf) else f"{rf:g}"] = entry
    return out


@dataclass
class EvalReport:
    scores: dict
    delays: dict = field(default_factory=dict)
    delay_summary: dict = field(default_factory=dict)
    chatter: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    debounce: tuple | None = None

    def to_dict(self) -> dict:
        rows = {}
        for fs, s in self.scores.items():
            rows[str(fs)] = {
                "features": FeatureSet(fs).label,
                "detect_accuracy": s.detect_accuracy,
                "type_accuracy": s.type_accuracy,
                "detect_confusion": s.detect_confusion.tolist(),
                "type_confusion": s.type_confusion.tolist(),
                "detect_tree": {"depth": s.detect_depth, "leaves": s.detect_leaves},
                "type_tree": {"depth": s.type_depth, "leaves": s.type_leaves},
            }
        return {
            "format": REPORT_FORMAT,
            "feature_sets": rows,
            "reference_leaves": REFERENCE_LEAVES,
            "delays_ms": {str(k): v for k, v in self.delays.items()},
            "delay_summary": self.delay_summary,
            "chatter": self.chatter,
            "debounce": list(self.debounce) if self.debounce else None,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return dumps_report(self.to_dict())

    def table(self) -> str:
        return render_table(self.to_dict())


def _canon(obj):
    """Round floats to 6 decimals so the JSON text is stable."""
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(f"{float(obj):.6f}")
    return obj


def dumps_report(doc: dict) -> str:
    return json.dumps(_canon(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def render_table(doc: dict) -> str:
    """Aligned text: one row per feature set, then tree sizes and delays."""
    rows = doc["feature_sets"]
    head = ("Input features", "Detection accuracy (%)", "Type accuracy (%)",
            "Detect depth/leaves", "Type depth/leaves")
    body = [(r["features"], f"{r['detect_accuracy']:.2f}", f"{r['type_accuracy']:.2f}",
             f"{r['detect_tree']['depth']}/{r['detect_tree']['leaves']}",
             f"{r['type_tree']['depth']}/{r['type_tree']['leaves']}")
            for fs, r in sorted(rows.items(), key=lambda kv: FeatureSet._VALID.index(kv[0]))]
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*r) for r in body]
    lines.append(f"(reference tree size: {doc['reference_leaves']} leaves)")
    if doc.get("delay_summary"):
        lines += ["", "Inception delay by fault resistance (ms)"]
        dh = ("Rf (ohm)", "faults", "detected", "median", "max", "trained", "late")
        drows = [(k, str(v["n"]), str(v["detected"]),
                  "-" if v["median_ms"] is None else f"{v['median_ms']:g}",
                  "-" if v["max_ms"] is None else str(v["max_ms"]),
                  "yes" if v["trained"] else "no", str(len(v["violations"])))
                 for k, v in doc["delay_summary"].items()]
        dw = [max(len(x) for x in col) for col in zip(dh, *drows)]
        dfmt = "  ".join(f"{{:>{w}}}" for w in dw)
        lines += [dfmt.format(*dh)] + [dfmt.format(*r) for r in drows]
    if doc.get("chatter"):
        c = doc["chatter"]
        lines += ["", "Detection transitions: " + ", ".join(f"{k}={c[k]}" for k in sorted(c))]
    return "\n".join(lines) + "\n"


def evaluate(pairs: dict, validation: dict, replay_data: Dataset | None = None,
             scenarios=None, replay_set: str = "IVPQ",
             debounce: tuple[int, int] | None = None, provenance: dict | None = None) -> EvalReport:
    """Accuracy per feature set plus delay and chatter statistics.

    ``pairs`` and ``validation`` map feature-set names to a :class:`TreePair`
    and the matching validation rows.  When ``replay_data`` (complete time
    series, any superset of the ``replay_set`` columns) is given, every
    scenario in it is replayed through ``pairs[replay_set]`` for delays and
    chatter counts.
    """
    if not pairs:
        raise DataError("no trained trees to evaluate")
    scores = {}
    for fs in FEATURE_SETS:
        if fs in pairs:
            if fs not in validation:
                raise DataError(f"no validation rows for feature set {fs}")
            scores[fs] = evaluate_pair(pairs[fs], validation[fs])
    report = EvalReport(scores, provenance=dict(provenance or {}), debounce=debounce)
    if replay_data is not None:
        fs = FeatureSet(replay_set)
        if fs not in pairs:
            raise DataError(f"no trees for replay feature set {fs}")
        replays = replay_dataset(replay_data.project(fs), pairs[fs], scenarios)
        report.delays = {r.scenario_id: r.inception_delay for r in replays if r.is_fault}
        if any(r.is_fault for r in replays):
            report.delay_summary = detection_delay_summary(replays)
        raw = [r.chatter() for r in replays]
        report.chatter = {"pickups": sum(c["pickups"] for c in raw),
                          "dropouts": sum(c["dropouts"] for c in raw),
                          "excess": sum(max(0, c["pickups"] - int(r.is_fault))
                                        for c, r in zip(raw, replays))}
        if debounce is not None:
            deb = [r.chatter(debounce) for r in replays]
            report.chatter.update({
                "debounced_pickups": sum(c["pickups"] for c in deb),
                "debounced_dropouts": sum(c["dropouts"] for c in deb),
                "debounced_excess": sum(max(0, c["pickups"] - int(r.is_fault))
                                        for c, r in zip(deb, replays))})
    return report


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
