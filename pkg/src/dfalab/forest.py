"""Random forest used as the static feature-selection baseline.

CART trees with Gini impurity, bootstrap sampling, sqrt(D) feature
candidates per node, grown to purity by default. Feature importance is the
mean decrease in impurity, normalized per tree and averaged, exactly what
the top-b static acquisition mask is ranked by.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ForestConfig:
    n_trees: int = 100          # 1000 to match the reference protocol
    max_features: int | None = None  # default sqrt(D)
    bootstrap: bool = True
    min_samples_leaf: int = 1
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")


@dataclass
class Tree:
    """Flat arrays; children of -1 mark leaves."""

    feature: np.ndarray     # [n_nodes] int
    threshold: np.ndarray   # [n_nodes] float
    left: np.ndarray        # [n_nodes] int
    right: np.ndarray       # [n_nodes] int
    histogram: np.ndarray   # [n_nodes, C] sample counts reaching the node
    importance: np.ndarray  # [D] impurity decrease, normalized to sum 1 (or 0)


@dataclass
class Forest:
    trees: list[Tree]
    n_features: int
    n_classes: int
    config: ForestConfig


def _gini(hist: np.ndarray) -> float:
    n = hist.sum()
    if n == 0:
        return 0.0
    p = hist / n
    return float(1.0 - (p * p).sum())


def _best_split_for_feature(x: np.ndarray, y: np.ndarray, n_classes: int,
                            min_leaf: int) -> tuple[float, float, float] | None:
    """Best (weighted child impurity, threshold) along one feature, or None
    if the feature is constant on this node."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    if xs[0] == xs[-1]:
        return None
    ys = y[order]
    n = len(ys)
    one_hot = np.zeros((n, n_classes))
    one_hot[np.arange(n), ys] = 1.0
    cum = one_hot.cumsum(axis=0)  # class counts in the left part after row i
    # split between i and i+1 allowed where the value actually changes
    cut = np.nonzero(xs[:-1] < xs[1:])[0]
    if min_leaf > 1:
        cut = cut[(cut + 1 >= min_leaf) & (n - cut - 1 >= min_leaf)]
    if cut.size == 0:
        return None
    left = cum[cut]
    total = cum[-1]
    right = total - left
    n_left = cut + 1.0
    n_right = n - n_left
    gini_left = 1.0 - ((left / n_left[:, None]) ** 2).sum(axis=1)
    gini_right = 1.0 - ((right / n_right[:, None]) ** 2).sum(axis=1)
    weighted = (n_left * gini_left + n_right * gini_right) / n
    best = int(weighted.argmin())
    threshold = 0.5 * (xs[cut[best]] + xs[cut[best] + 1])
    return float(weighted[best]), threshold, float(n_left[best])


def _grow_tree(x: np.ndarray, y: np.ndarray, n_classes: int,
               cfg: ForestConfig, rng: np.random.Generator) -> Tree:
    n_total, n_features = x.shape
    max_feats = cfg.max_features or max(1, int(np.sqrt(n_features)))

    feature, threshold, left, right, hists = [], [], [], [], []
    importance = np.zeros(n_features)

    def new_node(hist):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        hists.append(hist)
        return len(feature) - 1

    # stack of (sample indices, depth, parent node id, is_left_child)
    stack: list[tuple[np.ndarray, int, int, bool]] = [
        (np.arange(n_total), 0, -1, False)]
    while stack:
        idx, depth, parent, is_left = stack.pop()
        ysub = y[idx]
        hist = np.bincount(ysub, minlength=n_classes).astype(np.float64)
        node = new_node(hist)
        if parent >= 0:
            (left if is_left else right)[parent] = node

        parent_gini = _gini(hist)
        splittable = (parent_gini > 0.0 and len(idx) >= 2 * cfg.min_samples_leaf
                      and (cfg.max_depth is None or depth < cfg.max_depth))
        if not splittable:
            continue

        # walk a fresh feature permutation; constant features do not count
        # toward the candidate quota (the search keeps going until it has
        # seen max_feats splittable features or runs out)
        best = None
        seen_valid = 0
        for f in rng.permutation(n_features):
            col = x[idx, f]
            found = _best_split_for_feature(col, ysub, n_classes,
                                            cfg.min_samples_leaf)
            if found is None:
                continue
            seen_valid += 1
            weighted, thr, _ = found
            if best is None or weighted < best[0]:
                best = (weighted, int(f), thr)
            if seen_valid >= max_feats:
                break
        if best is None or best[0] >= parent_gini - 1e-12:
            continue  # no impurity decrease: keep the node as a leaf

        weighted, f, thr = best
        go_left = x[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        importance[f] += len(idx) / n_total * (parent_gini - weighted)
        # push right first so the left child is built (and numbered) next
        stack.append((idx[~go_left], depth + 1, node, False))
        stack.append((idx[go_left], depth + 1, node, True))

    total = importance.sum()
    if total > 0:
        importance = importance / total
    return Tree(feature=np.array(feature), threshold=np.array(threshold),
                left=np.array(left), right=np.array(right),
                histogram=np.stack(hists), importance=importance)


def fit_forest(x: np.ndarray, y: np.ndarray,
               cfg: ForestConfig | None = None) -> Forest:
    """Fit on flattened series [N, D]; deterministic under cfg.seed."""
    cfg = cfg or ForestConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError(f"bad shapes: x {x.shape}, y {y.shape}")
    if len(x) < 2:
        raise ValueError("need at least two samples")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("need at least two classes present")
    n_classes = int(y.max()) + 1

    trees = []
    for tree_rng in np.random.default_rng(cfg.seed).spawn(cfg.n_trees):
        if cfg.bootstrap:
            pick = tree_rng.integers(0, len(x), size=len(x))
            trees.append(_grow_tree(x[pick], y[pick], n_classes, cfg, tree_rng))
        else:
            trees.append(_grow_tree(x, y, n_classes, cfg, tree_rng))
    return Forest(trees=trees, n_features=x.shape[1],
                  n_classes=n_classes, config=cfg)


def _tree_proba(tree: Tree, x: np.ndarray) -> np.ndarray:
    n = len(x)
    node = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    while active.size:
        cur = node[active]
        internal = tree.feature[cur] >= 0
        active = active[internal]
        if not active.size:
            break
        cur = node[active]
        go_left = x[active, tree.feature[cur]] <= tree.threshold[cur]
        node[active] = np.where(go_left, tree.left[cur], tree.right[cur])
    hist = tree.histogram[node]
    return hist / hist.sum(axis=1, keepdims=True)


def predict_proba(forest: Forest, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    proba = np.zeros((len(x), forest.n_classes))
    for tree in forest.trees:
        proba += _tree_proba(tree, x)
    return proba / len(forest.trees)


def predict(forest: Forest, x: np.ndarray) -> np.ndarray:
    return predict_proba(forest, x).argmax(axis=1)


def feature_importance(forest: Forest) -> np.ndarray:
    """Mean decrease in impurity per flattened feature; sums to 1."""
    imp = np.zeros(forest.n_features)
    for tree in forest.trees:
        imp += tree.importance
    total = imp.sum()
    return imp / total if total > 0 else imp


def static_mask(importance: np.ndarray, horizon: int, n_features: int,
                budget: int) -> np.ndarray:
    """Collapse flattened [T*F] importance over time, keep the top-b
    features (ties broken toward the lower index). Returns a binary [F]."""
    importance = np.asarray(importance, dtype=np.float64)
    if importance.shape != (horizon * n_features,):
        raise ValueError(f"importance length {importance.shape} != "
                         f"{horizon * n_features}")
    if not 0 <= budget <= n_features:
        raise ValueError(f"budget {budget} out of range [0, {n_features}]")
    score = importance.reshape(horizon, n_features).sum(axis=0)
    ranked = np.argsort(-score, kind="stable")
    mask = np.zeros(n_features)
    mask[ranked[:budget]] = 1.0
    return mask
