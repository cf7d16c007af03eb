"""Labelled 1 ms feature rows, feature-set projections, splits and CSV I/O.

Datasets are columnar: one array per field, rows ordered by
``(scenario_id, t_ms)``.  RMS values are phasor magnitudes at the sample
instant; the simulator is phasor-domain, so no averaging window is involved.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataError, ParseError, ProvenanceError

log = logging.getLogger(__name__)

FEATURE_COLUMNS = ("Ia", "Ib", "Ic", "Va", "Vb", "Vc", "P", "Q")
ID_COLUMNS = ("scenario_id", "t_ms")
LABEL_COLUMNS = ("label_detect", "label_type")
CSV_HEADER = ID_COLUMNS + FEATURE_COLUMNS + LABEL_COLUMNS

_GROUPS = {"I": ("Ia", "Ib", "Ic"), "V": ("Va", "Vb", "Vc"), "P": ("P",), "Q": ("Q",)}


class FeatureSet(str):
    """One of ``I``, ``IV``, ``IPQ``, ``IVPQ``; also parses ``"I,V,P,Q"``."""

    _VALID = ("I", "IV", "IPQ", "IVPQ")

    def __new__(cls, name):
        key = "".join(str(name).replace(",", "").replace("$", "").split()).upper()
        if key not in cls._VALID:
            raise DataError(f"unknown feature set {name!r}; expected one of {cls._VALID}")
        return super().__new__(cls, key)

    @property
    def columns(self) -> tuple:
        return tuple(c for g in self for c in _GROUPS[g])

    @property
    def indices(self) -> tuple:
        return tuple(FEATURE_COLUMNS.index(c) for c in self.columns)

    @property
    def label(self) -> str:
        return ",".join(self)


FEATURE_SETS = tuple(FeatureSet(n) for n in FeatureSet._VALID)
FULL = FeatureSet("IVPQ")


class Sample(NamedTuple):
    scenario_id: int
    t_ms: int
    features: tuple
    label_detect: int
    label_type: int


@dataclass
class Dataset:
    scenario_id: np.ndarray
    t_ms: np.ndarray
    X: np.ndarray
    label_detect: np.ndarray
    label_type: np.ndarray
    feature_set: FeatureSet = FULL
    provenance: str = ""

    def __post_init__(self):
        self.feature_set = FeatureSet(self.feature_set)
        self.scenario_id = np.asarray(self.scenario_id, dtype=np.int64)
        self.t_ms = np.asarray(self.t_ms, dtype=np.int64)
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            X = X.reshape(len(self.t_ms), -1) if len(self.t_ms) else \
                X.reshape(0, len(self.feature_set.columns))
        self.X = X
        self.label_detect = np.asarray(self.label_detect, dtype=np.int64)
        self.label_type = np.asarray(self.label_type, dtype=np.int64)
        lengths = {len(self.t_ms), len(self.scenario_id), len(self.X), len(self.label_detect),
                   len(self.label_type)}
        if len(lengths) != 1:
            raise DataError(f"dataset columns have different lengths {sorted(lengths)}")
        if self.X.shape[1] != len(self.feature_set.columns):
            raise DataError(f"{self.X.shape[1]} feature columns for feature set {self.feature_set}")

    def __len__(self):
        return len(self.t_ms)

    @property
    def columns(self) -> tuple:
        return self.feature_set.columns

    def target(self, name: str) -> np.ndarray:
        if name == "detect":
            return self.label_detect
        if name == "type":
            return self.label_type
        raise DataError(f"target must be 'detect' or 'type', got {name!r}")

    def take(self, idx) -> "Dataset":
        return Dataset(self.scenario_id[idx], self.t_ms[idx], self.X[idx], self.label_detect[idx],
                       self.label_type[idx], self.feature_set, self.provenance)

    def project(self, fs) -> "Dataset":
        fs = FeatureSet(fs)
        try:
            cols = [self.columns.index(c) for c in fs.columns]
        except ValueError:
            raise DataError(f"cannot project {self.feature_set} onto {fs}") from None
        return Dataset(self.scenario_id, self.t_ms, self.X[:, cols], self.label_detect,
                       self.label_type, fs, self.provenance)

    def rows(self):
        for k in range(len(self)):
            yield Sample(int(self.scenario_id[k]), int(self.t_ms[k]), tuple(self.X[k].tolist()),
                         int(self.label_detect[k]), int(self.label_type[k]))

    def equals(self, other: "Dataset") -> bool:
        """Bit-exact equality of every numeric field and the feature set."""
        return (self.feature_set == other.feature_set and len(self) == len(other)
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("scenario_id", "t_ms", "label_detect", "label_type"))
                and np.array_equal(self.X.view(np.uint64), other.X.view(np.uint64)))

    @classmethod
    def empty(cls, fs=FULL, provenance="") -> "Dataset":
        fs = FeatureSet(fs)
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, np.zeros((0, len(fs.columns))), z, z, fs, provenance)


def extract_features(run) -> Dataset:
    """Labelled rows of one run with all eight feature columns."""
    if not run.ok:
        raise DataError(f"run {run.index} failed at {run.diagnostics['failed_at_ms']} ms")
    X = np.column_stack([np.abs(run.i), np.abs(run.v), run.p, run.q])
    if not np.all(np.isfinite(X)):
        raise DataError(f"run {run.index} contains non-finite values")
    s = run.scenario
    active = _window_mask(run.t_ms, s)
    detect = active.astype(np.int64)
    n = len(run.t_ms)
    return Dataset(np.full(n, run.index), run.t_ms, X, detect, detect * s.type_code,
                   FULL, run.provenance)


def _window_mask(t_ms, scenario) -> np.ndarray:
    if scenario.type_code == 0:
        return np.zeros(len(t_ms), dtype=bool)
    # compare on a 1 us integer grid so window edges are exact
    t_us = np.asarray(t_ms, dtype=np.int64) * 1000
    start = int(round(scenario.t_start * 1e6))
    end = int(round((scenario.t_start + scenario.duration) * 1e6))
    return (t_us >= start) & (t_us < end)


def assemble_dataset(runs, fs=FULL) -> Dataset:
    """Concatenate runs (ordered by scenario index) and keep the ``fs`` columns."""
    fs = FeatureSet(fs)
    runs = sorted(runs, key=lambda r: r.index)
    if not runs:
        return Dataset.empty(fs)
    provenance = {r.provenance for r in runs}
    if len(provenance) > 1:
        raise ProvenanceError(f"runs come from {len(provenance)} different batches")
    good = [r for r in runs if r.ok]
    if len(good) < len(runs):
        log.warning("excluding %d failed runs from the dataset", len(runs) - len(good))
    if len({r.index for r in good}) != len(good):
        raise DataError("duplicate scenario indices")
    if not good:
        return Dataset.empty(fs, provenance.pop())
    parts = [extract_features(r) for r in good]
    ds = Dataset(np.concatenate([p.scenario_id for p in parts]),
                 np.concatenate([p.t_ms for p in parts]),
                 np.concatenate([p.X for p in parts]),
                 np.concatenate([p.label_detect for p in parts]),
                 np.concatenate([p.label_type for p in parts]),
                 FULL, provenance.pop())
    return ds.project(fs)


def _n_train(n: int, train_fraction: float) -> int:
    if not 0 < train_fraction < 1:
        raise DataError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    return int(np.floor(train_fraction * n + 0.5))


def split_dataset(ds: Dataset, train_fraction: float = 0.8, seed: int = 20,
                  shuffle: bool = True) -> tuple[Dataset, Dataset]:
    """Row-level split; the training part holds ``round(train_fraction * N)`` rows."""
    n = len(ds)
    n_train = _n_train(n, train_fraction)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    return ds.take(order[:n_train]), ds.take(order[n_train:])


def split_by_scenario(ds: Dataset, train_fraction: float = 0.8,
                      seed: int = 20) -> tuple[Dataset, Dataset]:
    """Whole scenarios go to one side; row order inside each side is preserved."""
    if len(ds) == 0:
        raise DataError("cannot split an empty dataset")
    ids = np.unique(ds.scenario_id)
    n_train = _n_train(len(ids), train_fraction)
    train_ids = np.random.default_rng(seed).permutation(ids)[:n_train]
    mask = np.isin(ds.scenario_id, train_ids)
    return ds.take(np.flatnonzero(mask)), ds.take(np.flatnonzero(~mask))


def csv_header(fs=FULL) -> tuple:
    return ID_COLUMNS + FeatureSet(fs).columns + LABEL_COLUMNS


def export_csv(ds: Dataset, path) -> None:
    """Write ``ds`` with 17 significant digits so floats survive the round trip."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(csv_header(ds.feature_set)) + "\n")
        fmt = ",".join(["%d", "%d"] + ["%.17g"] * ds.X.shape[1] + ["%d", "%d"])
        table = np.column_stack([ds.scenario_id, ds.t_ms, ds.X, ds.label_detect, ds.label_type]) \
            if len(ds) else np.zeros((0, ds.X.shape[1] + 4))
        # integers stay exact through float64: ids and labels are small
        for row in table:
            fh.write(fmt % tuple(row) + "\n")


def import_csv(path, provenance: str = "") -> Dataset:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        fs = None
        for cand in FEATURE_SETS:
            if header == csv_header(cand):
                fs = cand
        if fs is None:
            raise ParseError(f"unexpected header {','.join(header)}", line=1)
        width = len(header)
        ids, feats, labels = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ParseError(f"expected {width} fields, got {len(row)}", line=lineno)
            try:
                ids.append((int(row[0]), int(row[1])))
                feats.append([float(x) for x in row[2:-2]])
                labels.append((int(row[-2]), int(row[-1])))
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    if not ids:
        return Dataset.empty(fs, provenance)
    ids = np.array(ids, dtype=np.int64)
    labels = np.array(labels, dtype=np.int64)
    return Dataset(ids[:, 0], ids[:, 1], np.array(feats, dtype=np.float64), labels[:, 0],
                   labels[:, 1], fs, provenance)
