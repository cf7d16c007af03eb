"""CART classification trees grown with the Gini criterion.

Splits send a row left when ``x[feature] <= threshold``; thresholds are
midpoints between consecutive distinct values.  Among equally good splits
the lowest feature index wins, then the lowest threshold.  Leaves predict the
majority class, lowest class index on ties.

Growth is depth-first with node ids in preorder.  Every feature column is
argsorted once at the root; children inherit order-preserving subsets of the
parent's sorted index lists, so each node costs one linear scan per feature.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DataError, ModelError

FORMAT = "mgprotect-tree"
VERSION = 1
# relative tolerance (of the node size) under which two split scores tie
TIE_RTOL = 1e-13


@dataclass(frozen=True)
class TrainConfig:
    max_depth: int = 43
    min_samples_split: int = 2
    min_impurity_decrease: float = 0.0
    seed: int = 20

    def __post_init__(self):
        if self.max_depth < 1:
            raise DataError("max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise DataError("min_samples_split must be >= 2")


def gini(counts) -> float:
    """``1 - sum(p_i^2)`` for per-class counts."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if not total > 0 or np.any(counts < 0):
        raise DataError("gini needs non-negative counts with a positive total")
    p = counts / total
    return float(1.0 - np.dot(p, p))


class Split(NamedTuple):
    feature: int
    threshold: float
    weighted_gini: float


def _scan(xs, ys, n_classes):
    """Best split position along one sorted column.

    Returns ``(score, scores, positions)`` where ``score`` is the maximum of
    ``sum(cL^2)/nL + sum(cR^2)/nR``; minimising weighted child Gini is the
    same as maximising it.  ``positions[k]`` is the last left row of candidate
    ``k``.  Counts are held in float64, exact for any realistic node size.
    """
    n = len(ys)
    positions = np.flatnonzero(xs[1:] > xs[:-1])
    if positions.size == 0:
        return -np.inf, None, positions
    # class-major layout keeps the running sums contiguous in memory
    cum = np.cumsum(np.eye(n_classes)[:, ys], axis=1)
    total = cum[:, -1]
    left = cum[:, positions]
    sq_left = np.einsum("ij,ij->j", left, left)
    # sum((total - left)^2) expanded so the cross term is one vector-matrix product
    sq_right = total @ total - 2.0 * (total @ left) + sq_left
    n_left = positions + 1.0
    scores = sq_left / n_left + sq_right / (n - n_left)
    return scores.max(), scores, positions


def _threshold(xs, pos):
    lo, hi = xs[pos], xs[pos + 1]
    mid = lo / 2.0 + hi / 2.0
    if not lo <= mid < hi:
        mid = lo
    return float(mid)


def _choose(per_feature, n):
    """Pick (feature, position, score) under the tie-breaking rule."""
    best = max((s for s, _, _ in per_feature), default=-np.inf)
    if best == -np.inf:
        return None
    tol = TIE_RTOL * n
    for f, (score, scores, positions) in enumerate(per_feature):
        if score >= best - tol:
            k = int(np.argmax(scores >= best - tol))
            return f, int(positions[k]), float(scores[k])
    return None


def best_split(X, y, n_classes: int | None = None, min_impurity_decrease: float = 0.0):
    """Exhaustive best Gini split of one node.

    Returns ``None`` when the node is pure, no feature varies, or the best
    impurity decrease falls below ``min_impurity_decrease``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(y)
    if n < 2:
        return None
    n_classes = int(n_classes or y.max() + 1)
    counts = np.bincount(y, minlength=n_classes)
    if np.count_nonzero(counts) <= 1:
        return None
    per_feature, sorted_cols = [], []
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        sorted_cols.append(xs)
        per_feature.append(_scan(xs, y[order], n_classes))
    return _accept(per_feature, sorted_cols, counts, n, min_impurity_decrease)


def _accept(per_feature, sorted_cols, counts, n, min_impurity_decrease):
    choice = _choose(per_feature, n)
    if choice is None:
        return None
    f, pos, score = choice
    parent = float((counts * counts).sum()) / n
    # impurity decrease of the node in Gini units; a zero-gain split is still
    # taken at the default threshold of 0 (needed to grow past XOR-like nodes)
    if (score - parent) / n < min_impurity_decrease - TIE_RTOL:
        return None
    return Split(f, _threshold(sorted_cols[f], pos), 1.0 - score / n)


@dataclass
class Tree:
    """Flat preorder tree.  ``feature[k] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray
    feature_names: tuple = ()
    provenance: str = ""
    target: str = ""

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[1]

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ModelError(f"tree expects {self.n_features} features "
                             f"({','.join(self.feature_names)}), got {X.shape[1]}")
        return X

    def apply(self, X) -> np.ndarray:
        """Leaf id reached by every row."""
        X = self._check(X)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] >= 0
        while active.any():
            r, nd = rows[active], node[active]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.counts[self.apply(X)], axis=1)

    def predict_proba(self, X) -> np.ndarray:
        c = self.counts[self.apply(X)].astype(np.float64)
        return c / c.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class TreeStats:
    depth: int
    n_leaves: int
    n_nodes: int


def tree_stats(tree: Tree) -> TreeStats:
    depth = np.zeros(tree.n_nodes, dtype=np.int64)
    for k in range(tree.n_nodes):
        if tree.feature[k] >= 0:
            depth[tree.left[k]] = depth[tree.right[k]] = depth[k] + 1
    return TreeStats(int(depth.max(initial=0)), int(np.sum(tree.feature < 0)), tree.n_nodes)


def fit(X, y, cfg: TrainConfig = TrainConfig(), n_classes: int | None = None,
        feature_names=None, provenance: str = "", target: str = "") -> Tree:
    """Grow a tree greedily on ``X`` (rows x features) and integer labels ``y``."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0 or len(X) != len(y):
        raise DataError("fit needs a non-empty 2-D feature matrix matching the labels")
    if y.min() < 0:
        raise DataError("class labels must be non-negative integers")
    n_classes = int(n_classes or y.max() + 1)
    n_features = X.shape[1]
    names = tuple(feature_names) if feature_names is not None else \
        tuple(f"x{j}" for j in range(n_features))

    feat, thr, left, right, counts = [], [], [], [], []
    go_left = np.zeros(len(y), dtype=bool)
    columns = [np.ascontiguousarray(X[:, f]) for f in range(n_features)]
    root = [np.argsort(col, kind="stable") for col in columns]
    stack = [(root, 0, -1)]
    while stack:
        idx, depth, parent = stack.pop()
        node = len(feat)
        if parent >= 0:
            if left[parent] < 0:
                left[parent] = node
            else:
                right[parent] = node
        n = len(idx[0])
        ys = y[idx[0]]
        c = np.bincount(ys, minlength=n_classes)
        feat.append(-1)
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(c)
        if depth >= cfg.max_depth or n < cfg.min_samples_split or np.count_nonzero(c) <= 1:
            continue
        # scan only over the classes present in this node
        present = np.flatnonzero(c)
        lut = np.zeros(n_classes, dtype=np.int64)
        lut[present] = np.arange(len(present))
        per_feature, cols = [], []
        for f in range(n_features):
            xs = columns[f][idx[f]]
            cols.append(xs)
            per_feature.append(_scan(xs, lut[y[idx[f]]], len(present)))
        split = _accept(per_feature, cols, c, n, cfg.min_impurity_decrease)
        if split is None:
            continue
        feat[node], thr[node] = split.feature, split.threshold
        rows = idx[split.feature]
        go_left[rows] = columns[split.feature][rows] <= split.threshold
        lefts = [ix[go_left[ix]] for ix in idx]
        rights = [ix[~go_left[ix]] for ix in idx]
        go_left[rows] = False
        # right pushed first so the left subtree is numbered next (preorder)
        stack.append((rights, depth + 1, node))
        stack.append((lefts, depth + 1, node))

    return Tree(np.array(feat, dtype=np.int64), np.array(thr, dtype=np.float64),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(counts, dtype=np.int64).reshape(-1, n_classes),
                names, provenance, target)


def fit_dataset(ds, target: str, cfg: TrainConfig = TrainConfig()) -> Tree:
    """Train on a :class:`~mgprotect.features.Dataset` for ``'detect'`` or ``'type'``."""
    n_classes = 2 if target == "detect" else 8
    return fit(ds.X, ds.target(target), cfg, n_classes=n_classes,
               feature_names=ds.columns, provenance=ds.provenance, target=target)


def predict(tree: Tree, row) -> tuple[int, np.ndarray]:
    """Class and normalised leaf distribution for a single feature row."""
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise ModelError("predict takes one feature row; use Tree.predict for batches")
    leaf = tree.apply(row)[0]
    c = tree.counts[leaf]
    return int(np.argmax(c)), c / c.sum()


def serialize(tree: Tree) -> str:
    """Line-oriented text, node records in preorder, closed by a checksum."""
    lines = [f"{FORMAT} {VERSION}",
             f"features {','.join(tree.feature_names)}",
             f"classes {','.join(str(k) for k in range(tree.n_classes))}",
             f"target {tree.target or '-'}",
             f"provenance {tree.provenance or '-'}",
             f"nodes {tree.n_nodes}"]
    for k in range(tree.n_nodes):
        cnt = " ".join(str(int(v)) for v in tree.counts[k])
        if tree.feature[k] >= 0:
            lines.append(f"N {int(tree.feature[k])} {float(tree.threshold[k])!r} {cnt}")
        else:
            lines.append(f"L {cnt}")
    body = "\n".join(lines) + "\n"
    return body + f"checksum {hashlib.sha256(body.encode()).hexdigest()}\n"


def deserialize(text: str, expect_provenance: str | None = None) -> Tree:
    lines = text.split("\n")
    if not lines or lines[0] != f"{FORMAT} {VERSION}":
        raise ModelError(f"not a {FORMAT} v{VERSION} file")
    try:
        end = next(k for k, ln in enumerate(lines) if ln.startswith("checksum "))
    except StopIteration:
        raise ModelError("model file is truncated (no checksum)") from None
    body = "\n".join(lines[:end]) + "\n"
    if hashlib.sha256(body.encode()).hexdigest() != lines[end].split(" ", 1)[1]:
        raise ModelError("model file checksum mismatch")
    head = dict(ln.split(" ", 1) for ln in lines[1:6])
    names = tuple(head["features"].split(",")) if head["features"] else ()
    n_classes = len(head["classes"].split(","))
    provenance = "" if head["provenance"] == "-" else head["provenance"]
    if expect_provenance is not None and provenance != expect_provenance:
        raise ModelError("model was trained on a different dataset")
    n = int(head["nodes"])
    records = lines[6:end]
    if len(records) != n:
        raise ModelError(f"expected {n} node records, found {len(records)}")
    feat = np.full(n, -1, dtype=np.int64)
    thr = np.zeros(n)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    counts = np.zeros((n, n_classes), dtype=np.int64)
    pending = []
    for k, rec in enumerate(records):
        parts = rec.split()
        if k:
            if not pending:
                raise ModelError("malformed node records")
            p = pending[-1]
            if left[p] < 0:
                left[p] = k
            else:
                right[p] = k
                pending.pop()
        if parts[0] == "N":
            feat[k], thr[k] = int(parts[1]), float(parts[2])
            counts[k] = [int(v) for v in parts[3:]]
            pending.append(k)
        elif parts[0] == "L":
            counts[k] = [int(v) for v in parts[1:]]
        else:
            raise ModelError(f"bad node record {rec!r}")
    if pending:
        raise ModelError("malformed node records")
    target = "" if head["target"] == "-" else head["target"]
    return Tree(feat, thr, left, right, counts, names, provenance, target)


def trees_equal(a: Tree, b: Tree) -> bool:
    return (a.feature_names == b.feature_names and a.provenance == b.provenance
            and all(np.array_equal(getattr(a, f), getattr(b, f))
                    for f in ("feature", "threshold", "left", "right", "counts")))
