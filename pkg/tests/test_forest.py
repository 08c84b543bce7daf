import numpy as np
import pytest

from dfalab import forest


def gini(hist):
    n = hist.sum()
    p = hist / n
    return 1.0 - (p * p).sum()


def xor_data(rng, n, noise_features=2):
    x01 = rng.random((n, 2))
    y = ((x01[:, 0] > 0.5) ^ (x01[:, 1] > 0.5)).astype(np.int64)
    x = np.hstack([x01, rng.random((n, noise_features))])
    return x, y


def test_separable_toy_perfect_train_accuracy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(80, 1))
    y = (x[:, 0] >= 0).astype(np.int64)
    f = forest.fit_forest(x, y, forest.ForestConfig(n_trees=5, seed=1))
    assert (forest.predict(f, x) == y).all()


def test_xor_toy_generalizes():
    rng = np.random.default_rng(1)
    x_train, y_train = xor_data(rng, 400)
    x_test, y_test = xor_data(rng, 400)
    f = forest.fit_forest(x_train, y_train,
                          forest.ForestConfig(n_trees=30, seed=2))
    acc = (forest.predict(f, x_test) == y_test).mean()
    assert acc > 0.9


def test_same_seed_identical_forests():
    rng = np.random.default_rng(3)
    x, y = xor_data(rng, 120)
    cfg = forest.ForestConfig(n_trees=8, seed=9)
    a = forest.fit_forest(x, y, cfg)
    b = forest.fit_forest(x, y, cfg)
    np.testing.assert_array_equal(forest.feature_importance(a),
                                  forest.feature_importance(b))
    probe = rng.random((50, 4))
    np.testing.assert_array_equal(forest.predict_proba(a, probe),
                                  forest.predict_proba(b, probe))


def test_errors_on_degenerate_input():
    with pytest.raises(ValueError, match="two classes"):
        forest.fit_forest(np.zeros((10, 2)), np.zeros(10, dtype=int))
    with pytest.raises(ValueError, match="two samples"):
        forest.fit_forest(np.zeros((1, 2)), np.array([0]))


def test_importance_normalized_and_ranks_label_feature():
    rng = np.random.default_rng(4)
    n, d = 600, 10
    x = rng.normal(size=(n, d))
    y = (x[:, 3] > 0).astype(np.int64)  # feature 3 defines the label
    f = forest.fit_forest(x, y, forest.ForestConfig(n_trees=20, seed=5))
    imp = forest.feature_importance(f)
    assert abs(imp.sum() - 1.0) < 1e-9
    assert imp.argmax() == 3
    noise_imp = np.delete(imp, 3)
    assert (noise_imp < 2.0 / d).all()


def test_splits_never_increase_impurity():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(200, 5))
    y = rng.integers(0, 3, 200)
    f = forest.fit_forest(x, y, forest.ForestConfig(n_trees=4, seed=7))
    for tree in f.trees:
        for node in range(len(tree.feature)):
            if tree.feature[node] < 0:
                continue
            parent = tree.histogram[node]
            left = tree.histogram[tree.left[node]]
            right = tree.histogram[tree.right[node]]
            np.testing.assert_array_equal(left + right, parent)
            weighted = (left.sum() * gini(left) + right.sum() * gini(right)) \
                / parent.sum()
            assert weighted <= gini(parent) + 1e-12


def test_forest_at_least_single_tree_accuracy():
    rng = np.random.default_rng(8)
    x_train, y_train = xor_data(rng, 300)
    x_test, y_test = xor_data(rng, 300)
    f = forest.fit_forest(x_train, y_train,
                          forest.ForestConfig(n_trees=25, seed=11))
    forest_acc = (forest.predict(f, x_test) == y_test).mean()
    best_tree = max(
        (forest._tree_proba(t, x_test).argmax(1) == y_test).mean()
        for t in f.trees)
    assert forest_acc >= best_tree - 0.02


# ---------------------------------------------------------------- static mask

def test_static_mask_tie_rule_and_full_budget():
    horizon, width = 3, 4
    uniform = np.full(horizon * width, 1.0 / (horizon * width))
    mask = forest.static_mask(uniform, horizon, width, 2)
    np.testing.assert_array_equal(mask, [1, 1, 0, 0])
    np.testing.assert_array_equal(
        forest.static_mask(uniform, horizon, width, 4), 1.0)


def test_static_mask_permutation_equivariant():
    rng = np.random.default_rng(12)
    horizon, width = 5, 6
    imp = rng.random(horizon * width)
    imp /= imp.sum()
    perm = rng.permutation(width)
    permuted = imp.reshape(horizon, width)[:, perm].ravel()
    base = forest.static_mask(imp, horizon, width, 3)
    shuffled = forest.static_mask(permuted, horizon, width, 3)
    np.testing.assert_array_equal(shuffled, base[perm])


def test_static_mask_ignores_constant_zero_features():
    # zeros-style fakes can never split, so their importance is exactly 0
    rng = np.random.default_rng(13)
    n, t, f_real, f_fake = 300, 6, 3, 5
    real = rng.normal(size=(n, t, f_real))
    y = (real[:, :, 0].mean(axis=1) > 0).astype(np.int64)
    series = np.concatenate([real, np.zeros((n, t, f_fake))], axis=2)
    flat = series.reshape(n, t * (f_real + f_fake))
    f = forest.fit_forest(flat, y, forest.ForestConfig(n_trees=10, seed=14))
    imp = forest.feature_importance(f)
    mask = forest.static_mask(imp, t, f_real + f_fake, 2)
    assert mask[:f_real].sum() == 2
    assert mask[f_real:].sum() == 0
