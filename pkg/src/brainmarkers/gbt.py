"""Second-order gradient-boosted trees for binary logistic loss.

Exact greedy splits on midpoints between consecutive distinct feature values,
leaf weights ``-G / (H + lambda)``, trees grown level by level. The split
search is the hot loop and has a numba kernel and a numpy path that agree
split for split.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _accel
from .errors import DegenerateInputError

MIN_SPLIT_GAIN = 1e-12


@dataclass(frozen=True)
class GBTConfig:
    max_depth: int = 3
    learning_rate: float = 0.1
    n_estimators: int = 100
    min_samples_leaf: int = 1
    feature_subsample: float = 1.0
    seed: int = 0
    reg_lambda: float = 1.0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if not 0 < self.feature_subsample <= 1:
            raise ValueError("feature_subsample must lie in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be >= 0")

    def key(self):
        return (self.max_depth, self.learning_rate, self.n_estimators)


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat binary tree; ``feature[i] == -1`` marks a leaf. Rows with
    ``x[feature] <= threshold`` go left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    depth: int

    def apply(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int64)
        for _ in range(self.depth):
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                break
            rows = np.nonzero(inner)[0]
            go_left = x[rows, f[inner]] <= self.threshold[node[inner]]
            node[rows] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])
        return node

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.value[self.apply(x)]

    def splits(self):
        """(feature, gain) for every internal node."""
        inner = self.feature >= 0
        return list(zip(self.feature[inner].tolist(), self.gain[inner].tolist()))


@dataclass(frozen=True, eq=False)
class GBTModel:
    trees: list[Tree]
    base_score: float
    config: GBTConfig
    n_features: int
    feature_names: list[str] | None = field(default=None)

    def margin(self, x) -> np.ndarray:
        x = _check_x(x, self.n_features)
        out = np.full(len(x), self.base_score)
        for t in self.trees:
            out += self.config.learning_rate * t.predict(x)
        return out

    def truncated(self, n_estimators: int) -> "GBTModel":
        if n_estimators > len(self.trees):
            raise ValueError(f"model has only {len(self.trees)} trees")
        return GBTModel(self.trees[:n_estimators], self.base_score,
                        replace(self.config, n_estimators=n_estimators),
                        self.n_features, self.feature_names)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_x(x, n_features=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None] if n_features == 1 else x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected a 2D feature array, got shape {x.shape}")
    if n_features is not None and x.shape[1] != n_features:
        raise ValueError(f"row arity {x.shape[1]} does not match the model's {n_features} features")
    return x


# ----------------------------------------------------------- split search


@_accel.njit
def _best_splits_kernel(xs_sorted, order, g, h, node_of, n_nodes, feats, lam, min_leaf):
    """Scan each feature in presorted order once, tracking per-node prefix sums."""
    n = g.shape[0]
    tot_g = np.zeros(n_nodes)
    tot_h = np.zeros(n_nodes)
    tot_n = np.zeros(n_nodes, dtype=np.int64)
    for i in range(n):
        k = node_of[i]
        if k >= 0:
            tot_g[k] += g[i]
            tot_h[k] += h[i]
            tot_n[k] += 1
    parent = np.empty(n_nodes)
    for k in range(n_nodes):
        parent[k] = tot_g[k] * tot_g[k] / (tot_h[k] + lam)
    best_gain = np.zeros(n_nodes)
    best_feat = np.full(n_nodes, -1, dtype=np.int64)
    best_thr = np.zeros(n_nodes)
    gl = np.zeros(n_nodes)
    hl = np.zeros(n_nodes)
    cl = np.zeros(n_nodes, dtype=np.int64)
    last = np.zeros(n_nodes)
    for fi in range(feats.shape[0]):
        f = feats[fi]
        gl[:] = 0.0
        hl[:] = 0.0
        cl[:] = 0
        for pos in range(n):
            s = order[f, pos]
            k = node_of[s]
            if k < 0:
                continue
            v = xs_sorted[f, pos]
            if cl[k] >= min_leaf and v > last[k] and tot_n[k] - cl[k] >= min_leaf:
                gr = tot_g[k] - gl[k]
                hr = tot_h[k] - hl[k]
                gain = 0.5 * (gl[k] * gl[k] / (hl[k] + lam) + gr * gr / (hr + lam) - parent[k])
                if gain > best_gain[k]:
                    best_gain[k] = gain
                    best_feat[k] = f
                    thr = last[k] + (v - last[k]) * 0.5
                    if thr >= v:
                        thr = last[k]
                    best_thr[k] = thr
            gl[k] += g[s]
            hl[k] += h[s]
            cl[k] += 1
            last[k] = v
    return best_gain, best_feat, best_thr


def _best_splits_numpy(xs_sorted, order, g, h, node_of, n_nodes, feats, lam, min_leaf):
    best_gain = np.zeros(n_nodes)
    best_feat = np.full(n_nodes, -1, dtype=np.int64)
    best_thr = np.zeros(n_nodes)
    sub_order = order[feats]
    sub_vals = xs_sorted[feats]
    node_sorted = node_of[sub_order]
    for k in range(n_nodes):
        members = node_of == k
        m = int(members.sum())
        if m < 2 * min_leaf or m < 2:
            continue
        # each feature's sorted order restricted to this node's samples
        keep = node_sorted == k
        idx = sub_order[keep].reshape(len(feats), m)
        vals = sub_vals[keep].reshape(len(feats), m)
        # sequential prefix sums, matching the kernel's accumulation order
        cg = np.cumsum(g[idx], axis=1)[:, :-1]
        ch = np.cumsum(h[idx], axis=1)[:, :-1]
        tg = np.cumsum(g[members])[-1]
        th = np.cumsum(h[members])[-1]
        gr, hr = tg - cg, th - ch
        parent = tg * tg / (th + lam)
        gain = 0.5 * (cg * cg / (ch + lam) + gr * gr / (hr + lam) - parent)
        left_n = np.arange(1, m)[None, :]
        valid = (vals[:, 1:] > vals[:, :-1]) & (left_n >= min_leaf) & (m - left_n >= min_leaf)
        gain = np.where(valid, gain, 0.0)
        flat = int(np.argmax(gain))
        fi, pos = divmod(flat, m - 1)
        if gain[fi, pos] > 0.0:
            best_gain[k] = gain[fi, pos]
            best_feat[k] = feats[fi]
            a, b = vals[fi, pos], vals[fi, pos + 1]
            thr = a + (b - a) * 0.5
            best_thr[k] = a if thr >= b else thr
    return best_gain, best_feat, best_thr


def best_splits(xs_sorted, order, g, h, node_of, n_nodes, feats, lam, min_leaf):
    args = (xs_sorted, order, g, h, node_of, n_nodes, np.ascontiguousarray(feats, dtype=np.int64),
            float(lam), int(min_leaf))
    if _accel.use_numba():
        return _best_splits_kernel(*args)
    return _best_splits_numpy(*args)


# --------------------------------------------------------------- training


class _Presorted:
    def __init__(self, x):
        xt = np.ascontiguousarray(x.T)
        self.order = np.ascontiguousarray(np.argsort(xt, axis=1, kind="stable"))
        self.values = np.ascontiguousarray(np.take_along_axis(xt, self.order, axis=1))


def _grow_tree(x, pre: _Presorted, g, h, config: GBTConfig, feats) -> Tree:
    n = len(g)
    lam = config.reg_lambda
    feature, threshold, left, right, gain = [-1], [0.0], [-1], [-1], [0.0]
    node_of = np.zeros(n, dtype=np.int64)  # position in the current frontier
    leaf_of = np.zeros(n, dtype=np.int64)  # tree node id
    frontier = [0]
    for _ in range(config.max_depth):
        bg, bf, bt = best_splits(pre.values, pre.order, g, h, node_of, len(frontier), feats,
                                 lam, config.min_samples_leaf)
        new_frontier = []
        new_node_of = np.full(n, -1, dtype=np.int64)
        for k, tree_id in enumerate(frontier):
            if bf[k] < 0 or bg[k] <= MIN_SPLIT_GAIN:
                continue
            feature[tree_id], threshold[tree_id], gain[tree_id] = int(bf[k]), float(bt[k]), float(bg[k])
            rows = np.nonzero(node_of == k)[0]
            go_left = x[rows, bf[k]] <= bt[k]
            for sel in (go_left, ~go_left):
                child = len(feature)
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                gain.append(0.0)
                if left[tree_id] < 0:
                    left[tree_id] = child
                else:
                    right[tree_id] = child
                new_node_of[rows[sel]] = len(new_frontier)
                leaf_of[rows[sel]] = child
                new_frontier.append(child)
        if not new_frontier:
            break
        frontier = new_frontier
        node_of = new_node_of
    value = np.zeros(len(feature))
    for node in np.unique(leaf_of):
        sel = leaf_of == node
        value[node] = -np.cumsum(g[sel])[-1] / (np.cumsum(h[sel])[-1] + lam)
    return Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold),
                np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                value, np.asarray(gain), _tree_depth(left, right))


def _tree_depth(left, right):
    depth = {0: 0}
    best = 0
    stack = [0]
    while stack:
        node = stack.pop()
        for c in (left[node], right[node]):
            if c >= 0:
                depth[c] = depth[node] + 1
                best = max(best, depth[c])
                stack.append(c)
    return best


def _check_training_data(x, y):
    x = _check_x(x)
    y = np.asarray(y).astype(np.int64).ravel()
    if len(y) != len(x):
        raise ValueError(f"{len(x)} rows but {len(y)} labels")
    if not np.all(np.isfinite(x)):
        raise DegenerateInputError("feature matrix contains NaN or Inf")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    n_pos = int(y.sum())
    if n_pos < 2 or len(y) - n_pos < 2:
        raise DegenerateInputError(
            f"need at least 2 samples per class, got {n_pos} positive / {len(y) - n_pos} negative"
        )
    return x, y


def gbt_train(x, y, config: GBTConfig = GBTConfig(), feature_names=None, callback=None) -> GBTModel:
    """Fit ``config.n_estimators`` boosting rounds.

    ``callback(round_index, tree)`` is invoked after every round; the grid
    search uses it to score prefixes without retraining.
    """
    x, y = _check_training_data(x, y)
    n, n_feat = x.shape
    pre = _Presorted(x)
    rate = y.mean()
    base = float(np.log(rate / (1.0 - rate)))
    margin = np.full(n, base)
    rng = np.random.default_rng(config.seed)
    n_sub = max(1, int(round(config.feature_subsample * n_feat)))
    trees = []
    for r in range(config.n_estimators):
        p = sigmoid(margin)
        g = p - y
        h = p * (1.0 - p)
        if n_sub < n_feat:
            feats = np.sort(rng.choice(n_feat, size=n_sub, replace=False))
        else:
            feats = np.arange(n_feat)
        tree = _grow_tree(x, pre, g, h, config, feats)
        trees.append(tree)
        margin += config.learning_rate * tree.predict(x)
        if callback is not None:
            callback(r, tree)
    return GBTModel(trees, base, config, n_feat, list(feature_names) if feature_names is not None else None)


def gbt_predict(model: GBTModel, x) -> np.ndarray:
    """Positive-class probabilities ``sigmoid(base + lr * sum(tree outputs))``."""
    return sigmoid(model.margin(x))
