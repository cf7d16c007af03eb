from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgprotect.cart import Tree, fit, predict
from mgprotect.errors import DataError, ModelError
from mgprotect.faultlab import FaultScenario
from mgprotect.features import FULL, Dataset, FeatureSet
from mgprotect.relay import (CaseReplay, TreePair, accuracy, confusion_matrix,
                             detection_delay_summary, dumps_report, evaluate, evaluate_pair,
                             k_of_n, render_table, replay_dataset, replay_rows,
                             transition_counts)


def constant_tree(n_classes, cls, names):
    counts = np.zeros((1, n_classes), dtype=np.int64)
    counts[0, cls] = 1
    return Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), counts,
                tuple(names))


def synthetic(n_scenarios=4, length=60, start=20, stop=40, seed=0):
    """Feature 0 carries the fault flag, feature 1 the type code."""
    rng = np.random.default_rng(seed)
    rows = []
    for s in range(n_scenarios):
        code = s % 7 + 1
        for t in range(length):
            on = start <= t < stop
            x = rng.normal(scale=0.01, size=8)
            x[0] += on
            x[1] += code * on
            rows.append((s, t, x, int(on), code * on))
    sid, t, X, d, ty = zip(*rows)
    return Dataset(np.array(sid), np.array(t), np.array(X), np.array(d), np.array(ty), FULL, "p")


def trained_pair(ds):
    names = ds.columns
    return TreePair(fit(ds.X, ds.label_detect, n_classes=2, feature_names=names),
                    fit(ds.X, ds.label_type, n_classes=8, feature_names=names))


def test_all_zero_tree_on_all_zero_data():
    ds = Dataset(np.zeros(10, int), np.arange(10), np.zeros((10, 8)), np.zeros(10, int),
                 np.zeros(10, int))
    pair = TreePair(constant_tree(2, 0, ds.columns), constant_tree(8, 0, ds.columns))
    score = evaluate_pair(pair, ds)
    assert score.detect_accuracy == 100.0 and score.type_accuracy == 100.0


@settings(max_examples=50, deadline=None)
@given(pairs=st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40),
       reps=st.integers(1, 4))
def test_confusion_matrix_invariants(pairs, reps):
    true, pred = map(np.array, zip(*pairs))
    cm = confusion_matrix(true, pred, 4)
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(true, minlength=4))
    np.testing.assert_array_equal(cm.sum(axis=0), np.bincount(pred, minlength=4))
    expected = 100.0 * np.mean(true == pred)
    assert accuracy(cm) == pytest.approx(expected)
    # duplicating every row leaves the accuracy unchanged
    cm2 = confusion_matrix(np.tile(true, reps), np.tile(pred, reps), 4)
    assert accuracy(cm2) == pytest.approx(expected)


def test_accuracy_of_empty_set_raises():
    with pytest.raises(DataError):
        accuracy(np.zeros((2, 2), dtype=int))


def test_replay_and_evaluate_agree():
    ds = synthetic()
    pair = trained_pair(ds)
    score = evaluate_pair(pair, ds)
    replays = replay_dataset(ds, pair)
    wrong = sum(len(r.misclassified_ms) for r in replays)
    assert score.detect_accuracy == 100.0 and wrong == 0
    for r in replays:
        assert r.t_start_ms == 20 and r.t_end_ms == 40
        assert r.inception_delay == 0 and r.clearance_delay == 0
        assert r.detected and r.type_settle_ms() == 0


def test_sample_by_sample_replay_equals_batch_accuracy():
    ds = synthetic(6, seed=2)
    noisy = ds.take(np.arange(len(ds)))
    noisy.X[:, 0] += np.random.default_rng(3).normal(scale=0.4, size=len(ds))
    pair = trained_pair(ds)
    score = evaluate_pair(pair, noisy)
    hits = sum(predict(pair.detect, row)[0] == lab
               for row, lab in zip(noisy.X, noisy.label_detect))
    assert score.detect_accuracy == 100.0 * hits / len(noisy)
    assert score.detect_accuracy < 100.0
    wrong = sum(int(np.sum(r.pred_detect != r.true_detect)) for r in replay_dataset(noisy, pair))
    assert score.detect_accuracy == 100.0 * (len(noisy) - wrong) / len(noisy)


@settings(max_examples=50, deadline=None)
@given(lag=st.integers(0, 30), start=st.integers(0, 20), width=st.integers(1, 25))
def test_delays_are_well_defined(lag, start, width):
    r = lagging_replay(lag, start=start, stop=start + width)
    if r.detected:
        assert 0 <= r.inception_delay <= width
    assert r.inception_delay is None or r.inception_delay >= 0


def test_replay_orders_rows_and_uses_scenario_window():
    ds = synthetic(1)
    pair = trained_pair(ds)
    shuffled = ds.take(np.random.default_rng(1).permutation(len(ds)))
    r = replay_rows(shuffled, pair, FaultScenario(1, 1, 1.0, 0.02, 0.02))
    np.testing.assert_array_equal(r.t_ms, np.arange(60))
    assert (r.t_start_ms, r.t_end_ms) == (20, 40)
    with pytest.raises(DataError):
        replay_rows(synthetic(2), pair)


def lagging_replay(lag, settle=None, length=60, start=20, stop=40):
    t = np.arange(length)
    true = ((t >= start) & (t < stop)).astype(int)
    pred = ((t >= start + lag) & (t < stop + lag)).astype(int)
    ptype = pred * 3
    if settle is not None:
        ptype = np.where((t >= start) & (t < start + settle), 5, ptype)
    ds = Dataset(np.zeros(length, int), t, np.column_stack([pred, ptype] + [t * 0.0] * 6),
                 true, true * 3)
    # trees that read the prediction straight from features 0 and 1
    X = np.column_stack([np.r_[0, 1], np.r_[0, 0], np.zeros((2, 6))])
    det = fit(X, np.array([0, 1]), n_classes=2, feature_names=ds.columns)
    Xt = np.zeros((8, 8))
    Xt[:, 1] = np.arange(8)
    typ = fit(Xt, np.arange(8), n_classes=8, feature_names=ds.columns)
    return replay_rows(ds, TreePair(det, typ))


@pytest.mark.parametrize("lag", [0, 1, 3, 7])
def test_delay_oracle(lag):
    r = lagging_replay(lag)
    assert r.inception_delay == lag and r.clearance_delay == lag
    assert r.detected
    assert len(r.misclassified_ms) == 2 * lag


def test_type_settle_time():
    r = lagging_replay(0, settle=6)
    assert r.type_settle_ms() == 6
    assert r.type_settle_ms(5) is None
    assert lagging_replay(0).type_settle_ms() == 0


def test_missed_fault_is_not_detected():
    r = lagging_replay(25)
    assert r.inception_delay == 25 and not r.detected


def test_delay_summary_single_and_equal_values():
    base = lagging_replay(3)
    base.scenario = FaultScenario(1, 1, 10.0, 0.02, 0.02)
    s = detection_delay_summary([base])["10"]
    assert s["median_ms"] == s["max_ms"] == 3
    assert s["violations"] == [] and s["trained"]

    late = lagging_replay(7)
    late.scenario = FaultScenario(1, 1, 10.0, 0.02, 0.02)
    late.scenario_id = 5
    s = detection_delay_summary([late, late])["10"]
    assert s["median_ms"] == s["max_ms"] == 7
    assert s["violations"] == [5, 5]
    with pytest.raises(DataError):
        detection_delay_summary([])


def test_k_of_n():
    raw = np.array([0, 1, 0, 0, 1, 1, 1, 0, 1, 1, 0, 0, 0])
    out = k_of_n(raw, 2, 3)
    np.testing.assert_array_equal(out, [0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 0, 0])
    np.testing.assert_array_equal(k_of_n(raw, 1, 1), raw)
    assert transition_counts(raw) == {"pickups": 3, "dropouts": 3}
    assert transition_counts(out) == {"pickups": 1, "dropouts": 1}
    with pytest.raises(DataError):
        k_of_n(raw, 4, 3)
    with pytest.raises(DataError):
        k_of_n(raw, 1, 3)


@settings(max_examples=50, deadline=None)
@given(raw=st.lists(st.integers(0, 1), max_size=60), k=st.integers(2, 3))
def test_k_of_n_never_adds_transitions(raw, k):
    out = k_of_n(raw, k, 3)
    # both traces start from an implicit 0
    assert (transition_counts(np.r_[0, out])["pickups"]
            <= transition_counts(np.r_[0, raw])["pickups"])
    assert set(np.unique(out)) <= {0, 1}


def test_report_is_deterministic_and_renders():
    ds = synthetic()
    pairs = {FeatureSet("IVPQ"): trained_pair(ds)}
    valid = {FeatureSet("IVPQ"): ds}
    scen = [FaultScenario(s % 7 + 1, 1, 1.0, 0.02, 0.02) for s in range(4)]
    a = evaluate(pairs, valid, ds, scen, debounce=(2, 3), provenance={"dataset": "p"})
    b = evaluate(pairs, valid, ds, scen, debounce=(2, 3), provenance={"dataset": "p"})
    assert a.to_json() == b.to_json()
    doc = json.loads(a.to_json())
    assert doc["format"] == "mgprotect-report/1"
    assert doc["feature_sets"]["IVPQ"]["detect_accuracy"] == 100.0
    assert doc["delay_summary"]["1"]["median_ms"] == 0
    assert doc["chatter"]["excess"] == 0
    assert dumps_report(doc) == a.to_json()
    table = render_table(doc)
    assert "I,V,P,Q" in table and "100.00" in table


def test_pair_mismatch_raises():
    ds = synthetic(1)
    pair = trained_pair(ds)
    with pytest.raises(ModelError):
        evaluate_pair(pair, ds.project("IV"))
    bad = TreePair(pair.detect, constant_tree(8, 0, FeatureSet("IV").columns))
    with pytest.raises(ModelError):
        evaluate_pair(bad, ds)
    with pytest.raises(DataError):
        evaluate({}, {})
    with pytest.raises(DataError):
        evaluate_pair(pair, Dataset.empty(FULL))
