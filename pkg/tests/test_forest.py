import itertools
import random

import numpy as np
import pytest

from trafficloop.core import ClassLabel
from trafficloop.errors import DimensionMismatch, EmptyDataset
from trafficloop.forest import (
    Dataset,
    DecisionTree,
    RandomForest,
    TrainParams,
    TreeNode,
    best_split,
    evaluate,
    predict,
    predict_batch,
    serialize_model,
    train_forest,
    train_tree,
)
from trafficloop.harness import labelled_windows

from split_oracle import brute_force_split


def leaf(*counts):
    return TreeNode(True, 0, 0.0, 0, 0, tuple(counts))


def stump(feature, thr, left_counts, right_counts):
    return DecisionTree([TreeNode(False, feature, thr, 1, 2, (0, 0, 0)), leaf(*left_counts), leaf(*right_counts)])


def pad(rows):
    return np.array([list(r) + [0.0] * (8 - len(r)) for r in rows], dtype=np.float64)


# ---------------------------------------------------------------- best_split

def test_best_split_hand_example(backend):
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    s = best_split(X, [0, 0, 1, 1])
    assert (s.feature, s.threshold) == (0, 2.5)
    # both children pure: the decrease is the whole parent impurity 1 - 2 * 0.5**2
    assert s.impurity_decrease == pytest.approx(0.5)


def test_best_split_pure_node(backend):
    assert best_split(np.array([[1.0], [2.0], [3.0]]), [2, 2, 2]) is None


def test_best_split_tie_goes_to_lowest_feature(backend):
    X = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0], [4.0, 40.0]])
    s = best_split(X, [0, 0, 1, 1])
    assert (s.feature, s.threshold) == (0, 2.5)


def test_best_split_matches_brute_force(backend):
    rng = random.Random(1234)
    for _ in range(300):
        n, d = rng.randint(2, 40), rng.randint(1, 4)
        X = [[rng.choice([0.0, 0.5, 1.0, 2.0, 3.5, 7.0]) for _ in range(d)] for _ in range(n)]
        y = [rng.randrange(3) for _ in range(n)]
        w = [rng.randint(1, 3) for _ in range(n)]
        feats = sorted(rng.sample(range(d), rng.randint(1, d)))
        expected = brute_force_split(X, y, w, feats)
        got = best_split(np.array(X), y, w, feats)
        if expected is None:
            assert got is None
        else:
            assert (got.feature, got.threshold) == expected[:2]
            assert got.impurity_decrease == pytest.approx(float(expected[2]), rel=1e-12)


def test_best_split_threshold_sends_equal_values_left():
    X = np.array([[1.0], [1.0], [5.0], [5.0]])
    s = best_split(X, [1, 1, 2, 2])
    assert s.threshold == 3.0


# ---------------------------------------------------------------- training

def test_single_class_gives_single_leaf():
    tree = train_tree(Dataset(pad([[1], [2], [3]]), [1, 1, 1]))
    assert tree.nodes == (leaf(0, 3, 0),)


def test_max_depth_zero_is_majority_leaf():
    tree = train_tree(Dataset(pad([[1], [2], [3]]), [0, 1, 1]), TrainParams(max_depth=0))
    assert tree.nodes == (leaf(1, 2, 0),)
    assert predict(tree, [0] * 8) == (ClassLabel.CG, pytest.approx(2 / 3))


def test_xor_needs_depth_two():
    pts = [(0, 0), (1, 1), (0, 1), (1, 0)]
    y = [0, 0, 1, 1]
    X = pad(pts)
    # brute force: no single axis-aligned cut separates the classes
    for f, thr in itertools.product(range(2), (0.5,)):
        sides = {(p[f] <= thr, lab) for p, lab in zip(pts, y)}
        assert len(sides) == 4
    tree = train_tree(Dataset(X, y), TrainParams(features_per_split=8, min_samples_split=2))
    assert tree.depth == 2
    assert evaluate(tree, X, y)[0] == 1.0


def test_empty_dataset_raises():
    with pytest.raises(EmptyDataset):
        train_tree(Dataset(np.zeros((0, 8)), []))
    with pytest.raises(EmptyDataset):
        train_forest(Dataset(np.zeros((0, 8)), []))


def test_nodes_are_preorder_and_reachable():
    X, y = labelled_windows(100, seed=3)
    tree = train_forest(Dataset(X, y), TrainParams(n_trees=1, seed=5)).trees[0]
    seen = {0}
    for i, n in enumerate(tree.nodes):
        if not n.is_leaf:
            assert n.left > i and n.right > i
            seen |= {n.left, n.right}
        else:
            assert sum(n.counts) > 0
    assert seen == set(range(len(tree.nodes)))


def test_forest_is_deterministic():
    X, y = labelled_windows(150, seed=4)
    a = train_forest(Dataset(X, y), TrainParams(seed=9, n_trees=5))
    b = train_forest(Dataset(X, y), TrainParams(seed=9, n_trees=5))
    assert serialize_model(a, 1) == serialize_model(b, 1)
    c = train_forest(Dataset(X, y), TrainParams(seed=10, n_trees=5))
    assert serialize_model(a, 1) != serialize_model(c, 1)


def test_degenerate_forest_equals_tree():
    X, y = labelled_windows(150, seed=5)
    params = TrainParams(n_trees=1, bootstrap=False, features_per_split=8, seed=2)
    forest = train_forest(Dataset(X, y), params)
    tree = train_tree(Dataset(X, y), params)
    probe = np.random.default_rng(0).uniform(X.min(0), X.max(0), size=(2000, 8))
    for x in np.vstack([X, probe]):
        assert predict(forest, x) == predict(tree, x)


def test_forest_beats_tree_under_label_noise():
    X, y = labelled_windows(600, seed=6)
    Xt, yt = labelled_windows(600, seed=7)
    rng = np.random.default_rng(42)
    noisy = y.copy()
    flip = rng.random(len(y)) < 0.10
    noisy[flip] = (noisy[flip] + rng.integers(1, 3, flip.sum())) % 3
    data = Dataset(X, noisy)
    forest_acc = evaluate(train_forest(data, TrainParams(seed=1)), Xt, yt)[0]
    tree_acc = evaluate(train_tree(data, TrainParams(seed=1, features_per_split=8)), Xt, yt)[0]
    assert forest_acc >= tree_acc


def test_row_weights_equal_duplication():
    rng = np.random.default_rng(3)
    X = rng.integers(0, 5, size=(30, 8)).astype(float)
    y = rng.integers(0, 3, size=30)
    w = rng.integers(1, 4, size=30)
    params = TrainParams(features_per_split=8, max_depth=None, min_samples_split=2)
    weighted = train_tree(Dataset(X, y, w), params)
    duplicated = train_tree(Dataset(np.repeat(X, w, axis=0), np.repeat(y, w)), params)
    assert weighted == duplicated


@pytest.mark.parametrize("seed", range(5))
def test_memorization(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 4, size=(60, 8)).astype(float)
    X = np.unique(X, axis=0)
    y = rng.integers(0, 3, size=len(X))
    tree = train_tree(Dataset(X, y), TrainParams(max_depth=None, min_samples_split=2, features_per_split=8))
    assert evaluate(tree, X, y)[0] == 1.0


def test_monotone_transform_invariance():
    X, y = labelled_windows(120, seed=8)
    f = 4
    Xt = X.copy()
    Xt[:, f] = np.cbrt(Xt[:, f]) * 3.0 + 11.0
    params = TrainParams(seed=3, n_trees=7)
    a = train_forest(Dataset(X, y), params)
    b = train_forest(Dataset(Xt, y), params)
    # thresholds are midpoints, so the comparison is exact for training points
    assert predict_batch(a, X).tolist() == predict_batch(b, Xt).tolist()


# ---------------------------------------------------------------- predict / evaluate

def test_constant_leaf_prediction():
    tree = DecisionTree([leaf(10, 0, 0)])
    for x in ([0] * 8, [1e9] * 8, [-5.5] * 8):
        assert predict(tree, x) == (ClassLabel.AR, 1.0)


def test_hand_built_stump():
    tree = stump(0, 2.5, (0, 5, 0), (0, 0, 5))
    assert predict(tree, [1] + [0] * 7) == (ClassLabel.CG, 1.0)
    assert predict(tree, [2.5] + [0] * 7) == (ClassLabel.CG, 1.0)
    assert predict(tree, [3] + [0] * 7) == (ClassLabel.OTHER, 1.0)


def test_forest_soft_vote():
    forest = RandomForest([DecisionTree([leaf(1, 0, 0)]), DecisionTree([leaf(1, 0, 0)]), DecisionTree([leaf(0, 1, 0)])])
    label, conf = predict(forest, [0] * 8)
    assert label is ClassLabel.AR
    assert conf == pytest.approx(2 / 3)


def test_prediction_ties_go_to_lowest_class():
    assert predict(DecisionTree([leaf(0, 4, 4)]), [0] * 8) == (ClassLabel.CG, 0.5)
    forest = RandomForest([DecisionTree([leaf(0, 0, 1)]), DecisionTree([leaf(1, 0, 0)])])
    assert predict(forest, [0] * 8) == (ClassLabel.AR, 0.5)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        predict(DecisionTree([leaf(1, 0, 0)]), [0.0] * 7)


def test_evaluate_examples():
    X = pad([[1], [3]] * 5)
    y = [1, 2] * 5
    model = stump(0, 2.5, (0, 5, 0), (0, 0, 5))
    acc, conf = evaluate(model, X, y)
    assert acc == 1.0 and conf == [[0, 0, 0], [0, 5, 0], [0, 0, 5]]

    acc, conf = evaluate(model, X, [2, 1] * 5)
    assert acc == 0.0 and all(conf[i][i] == 0 for i in range(3))

    acc, conf = evaluate(model, pad([[1], [3], [1], [3]]), [1, 2, 0, 0])
    assert acc == 0.5
    assert conf == [[0, 1, 1], [0, 1, 0], [0, 0, 1]]

    with pytest.raises(EmptyDataset):
        evaluate(model, np.zeros((0, 8)), [])
