"""CART decision trees and bagged random forests over 8 window features.

Trees are stored as flat node arrays in preorder (root at 0, children after
their parent). While growing, an impure node still splits when the best cut
has zero Gini gain (XOR-like layouts need this); it only becomes a leaf when
no candidate feature takes two distinct values. Splits minimise weighted Gini impurity; the split scan is
done by the active kernel backend with exact integer arithmetic, so ties are
resolved deterministically: lowest feature index, then lowest threshold.

Randomness (bootstrap draws, per-node feature subsets) comes from SplitMix64
streams seeded by ``derive_seed(params.seed, tree_index)``. A tree's stream is
consumed in this order: ``n`` bootstrap draws (if bootstrapping), then one
partial Fisher-Yates shuffle per split attempt, nodes visited in preorder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from ..core import ClassLabel
from ..errors import DimensionMismatch, EmptyDataset
from ..rng import SplitMix64, derive_seed
from . import kernels

N_FEATURES = 8
N_CLASSES = 3


@dataclass(frozen=True)
class TrainParams:
    max_depth: Optional[int] = 12  # None: unbounded
    min_samples_split: int = 4
    n_trees: int = 20
    features_per_split: int = 3
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if not 1 <= self.features_per_split <= N_FEATURES:
            raise ValueError(f"features_per_split must be in [1, {N_FEATURES}]")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")


class Dataset:
    """Feature matrix, integer class codes and integer row weights (duplication factors)."""

    def __init__(self, X, y, w=None) -> None:
        self.X = np.ascontiguousarray(X, dtype=np.float64).reshape(-1, N_FEATURES)
        self.y = np.ascontiguousarray(y, dtype=np.int64)
        self.w = np.ones(len(self.y), dtype=np.int64) if w is None else np.ascontiguousarray(w, dtype=np.int64)
        if not (len(self.X) == len(self.y) == len(self.w)):
            raise DimensionMismatch("X, y and w lengths differ")
        if len(self.w) and self.w.min() < 1:
            raise ValueError("row weights must be >= 1")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= N_CLASSES):
            raise ValueError("labels must be class codes 0..2")

    @classmethod
    def from_rows(cls, rows: Sequence[tuple[Sequence[float], ClassLabel]], weights=None) -> "Dataset":
        X = np.array([r[0] for r in rows], dtype=np.float64).reshape(-1, N_FEATURES)
        return cls(X, [int(r[1]) for r in rows], weights)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def total_weight(self) -> int:
        return int(self.w.sum())


class TreeNode(NamedTuple):
    is_leaf: bool
    feature: int
    threshold: float
    left: int
    right: int
    counts: tuple[int, int, int]


class DecisionTree:
    n_features = N_FEATURES

    def __init__(self, nodes: Sequence[TreeNode]) -> None:
        if not nodes:
            raise ValueError("a tree needs at least one node")
        self.nodes = tuple(TreeNode(*n) for n in nodes)
        self._flat = _Flat([self])

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def depth(self) -> int:
        depth = [0] * len(self.nodes)
        for i, n in enumerate(self.nodes):
            if not n.is_leaf:
                depth[n.left] = depth[n.right] = depth[i] + 1
        return max(depth)

    def __eq__(self, other) -> bool:
        return isinstance(other, DecisionTree) and self.nodes == other.nodes

    def __repr__(self) -> str:
        return f"DecisionTree(nodes={len(self.nodes)}, depth={self.depth})"


class RandomForest:
    n_features = N_FEATURES

    def __init__(self, trees: Sequence[DecisionTree], seed: int = 0) -> None:
        if not trees:
            raise ValueError("a forest needs at least one tree")
        self.trees = tuple(trees)
        self.seed = seed
        self._flat = _Flat(self.trees)

    def __eq__(self, other) -> bool:
        return isinstance(other, RandomForest) and self.trees == other.trees

    def __repr__(self) -> str:
        return f"RandomForest(trees={len(self.trees)})"


Model = Union[DecisionTree, RandomForest]


class _Flat:
    """All trees of a model concatenated into kernel-ready arrays."""

    def __init__(self, trees: Sequence[DecisionTree]) -> None:
        nodes = [n for t in trees for n in t.nodes]
        roots, base = [], 0
        left, right = [], []
        for t in trees:
            roots.append(base)
            for n in t.nodes:
                left.append(n.left + base if not n.is_leaf else 0)
                right.append(n.right + base if not n.is_leaf else 0)
            base += len(t.nodes)
        counts = np.array([n.counts for n in nodes], dtype=np.float64)
        totals = counts.sum(axis=1, keepdims=True)
        proba = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
        self.arrays = (
            np.array([n.feature for n in nodes], dtype=np.int64),
            np.array([n.threshold for n in nodes], dtype=np.float64),
            np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64),
            np.array([n.is_leaf for n in nodes], dtype=np.uint8),
            np.ascontiguousarray(proba),
            np.array(roots, dtype=np.int64),
        )
        self._engines: dict = {}

    def engine(self):
        """Kernel-side ``Forest`` for the active backend, built on first use."""
        k = kernels.active
        eng = self._engines.get(k.__name__)
        if eng is None:
            eng = self._engines[k.__name__] = k.Forest(*self.arrays)
        return eng


# --------------------------------------------------------------------------
# training

class Split(NamedTuple):
    feature: int
    threshold: float
    impurity_decrease: float


def _class_counts(y: np.ndarray, w: np.ndarray) -> list[int]:
    return np.bincount(y, weights=None if w is None else w, minlength=N_CLASSES).astype(np.int64).tolist()


def _scan(xs, ys, ws, counts):
    k = kernels.active
    if sum(counts) > kernels.MAX_TOTAL_WEIGHT:
        k = kernels._pykernels
    return k.scan_feature(xs, ys, ws, counts)


def _best_split_idx(X, y, w, idx, features, counts, allow_zero_gain=False) -> Optional[Split]:
    n = sum(counts)
    s_parent = sum(c * c for c in counts)
    best = None  # (feature, threshold, num, den)
    for f in features:
        col = X[idx, f]
        order = np.argsort(col, kind="stable")
        res = _scan(np.ascontiguousarray(col[order]), y[idx[order]], w[idx[order]], counts)
        if res is None:
            continue
        thr, num, den = res
        if best is None or num * best[3] > best[2] * den:
            best = (f, thr, num, den)
    if best is None:
        return None
    f, thr, num, den = best
    # split helps iff S_L/n_L + S_R/n_R > S/n
    gain = num * n - s_parent * den
    if gain < 0 or (gain == 0 and not allow_zero_gain):
        return None
    return Split(f, thr, gain / (den * n * n))


def best_split(X, y, w=None, features: Optional[Sequence[int]] = None) -> Optional[Split]:
    """Weighted-Gini best split of a node, or None when no split strictly helps.

    Thresholds are midpoints of consecutive distinct values; rows with
    ``x[feature] <= threshold`` go left.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch("X must be 2-D")
    y = np.ascontiguousarray(y, dtype=np.int64)
    w = np.ones(len(y), dtype=np.int64) if w is None else np.ascontiguousarray(w, dtype=np.int64)
    if len(y) < 2:
        return None
    features = range(X.shape[1]) if features is None else sorted(features)
    idx = np.arange(len(y))
    return _best_split_idx(X, y, w, idx, features, _class_counts(y, w))


def train_tree(data: Dataset, params: TrainParams = TrainParams(), rng: Optional[SplitMix64] = None) -> DecisionTree:
    if len(data) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    X, y, w = data.X, data.y, data.w
    if rng is None:
        rng = SplitMix64(params.seed)
    subsample = params.features_per_split < N_FEATURES
    all_features = list(range(N_FEATURES))

    nodes: list[Optional[list]] = []
    # (row indices, depth, parent node index, is right child)
    stack = [(np.flatnonzero(w > 0), 0, -1, False)]
    while stack:
        idx, depth, parent, is_right = stack.pop()
        me = len(nodes)
        nodes.append(None)
        if parent >= 0:
            nodes[parent][4 if is_right else 3] = me
        counts = _class_counts(y[idx], w[idx])
        n = sum(counts)
        split = None
        pure = max(counts) == n
        if not pure and (params.max_depth is None or depth < params.max_depth) and n >= params.min_samples_split:
            features = rng.sample_without_replacement(N_FEATURES, params.features_per_split) if subsample else all_features
            split = _best_split_idx(X, y, w, idx, features, counts, allow_zero_gain=True)
        if split is None:
            nodes[me] = [True, 0, 0.0, 0, 0, tuple(counts)]
            continue
        nodes[me] = [False, split.feature, split.threshold, 0, 0, (0, 0, 0)]
        go_left = X[idx, split.feature] <= split.threshold
        stack.append((idx[~go_left], depth + 1, me, True))
        stack.append((idx[go_left], depth + 1, me, False))
    return DecisionTree([TreeNode(*n) for n in nodes])


def bootstrap_weights(data: Dataset, rng: SplitMix64) -> np.ndarray:
    """Multiplicity of each row after ``total_weight`` draws with replacement from the expanded rows."""
    total = data.total_weight
    draws = rng.randbelow_many(total, total)
    rows = np.searchsorted(np.cumsum(data.w), draws, side="right")
    return np.bincount(rows, minlength=len(data)).astype(np.int64)


def train_forest(data: Dataset, params: TrainParams = TrainParams()) -> RandomForest:
    if len(data) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    trees = []
    for t in range(params.n_trees):
        rng = SplitMix64(derive_seed(params.seed, t))
        if params.bootstrap:
            bw = bootstrap_weights(data, rng)
            keep = bw > 0
            sample = Dataset(data.X[keep], data.y[keep], bw[keep])
        else:
            sample = data
        trees.append(train_tree(sample, params, rng))
    return RandomForest(trees, params.seed)


# --------------------------------------------------------------------------
# inference

def _argmax(scores) -> int:
    best = 0
    for c in (1, 2):
        if scores[c] > scores[best]:
            best = c
    return best


def _check_x(x) -> list[float]:
    xs = list(map(float, x))
    if len(xs) != N_FEATURES:
        raise DimensionMismatch(f"expected {N_FEATURES} features, got {len(xs)}")
    if not all(map(math.isfinite, xs)):
        raise ValueError("features must be finite")
    return xs


def predict(model: Model, x) -> tuple[ClassLabel, float]:
    """Class and confidence for one feature vector.

    A tree answers with its leaf's majority class and that class's share of
    the leaf. A forest sums the leaf probability vectors of its trees (soft
    vote) and reports the winner's share of the total. Ties go to the lowest
    class code.
    """
    scores = model._flat.engine().proba(_check_x(x))
    c = _argmax(scores)
    total = scores[0] + scores[1] + scores[2]
    return ClassLabel(c), scores[c] / total


def predict_proba_batch(model: Model, X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64).reshape(-1, N_FEATURES)
    return model._flat.engine().proba_batch(X)


def predict_batch(model: Model, X) -> np.ndarray:
    scores = predict_proba_batch(model, X)
    # np.argmax takes the first maximum, i.e. the lowest class code
    return np.argmax(scores, axis=1)


def evaluate(model: Model, X, y) -> tuple[float, list[list[int]]]:
    """Accuracy and 3x3 confusion (rows: true class, columns: predicted)."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise EmptyDataset("cannot evaluate on zero rows")
    pred = predict_batch(model, X)
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    return float(np.trace(confusion)) / len(y), confusion.tolist()
