"""Evaluation protocol: stratified hold-out, 10-fold grid search, and
scoring every fold model on the held-out test set (mean +/- SD)."""

from __future__ import annotations

import csv
import itertools
import json
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigurationError, MetricUndefinedError, StratificationError
from .gbt import GBTConfig, GBTModel, gbt_train, sigmoid

METRICS = ("accuracy", "auc", "precision", "recall", "specificity")
THRESHOLD = 0.5
DEFAULT_GRID = {
    "max_depth": (2, 3, 4),
    "learning_rate": (0.05, 0.1, 0.3),
    "n_estimators": (50, 100, 200),
}


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named component, derived from one seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def stream_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


# ---------------------------------------------------------------- splits


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(labels, test_fraction: float = 0.2, seed: int = 0):
    """Per-class ``round(n_c * test_fraction)`` (at least 1) test members."""
    y = np.asarray(labels).astype(np.int64).ravel()
    classes = np.unique(y)
    if len(classes) < 2:
        raise StratificationError("stratified split needs both classes present")
    rng = stream_rng(seed, "split")
    test = []
    for c in classes:
        members = np.nonzero(y == c)[0]
        n_test = max(1, _round_half_up(len(members) * test_fraction))
        if n_test >= len(members):
            raise StratificationError(f"class {c} has {len(members)} members; cannot hold out {n_test}")
        test.extend(rng.permutation(members)[:n_test].tolist())
    test = np.sort(np.asarray(test, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(y)), test)
    return train, test


def kfold(train_indices, labels, k: int = 10, seed: int = 0):
    """Stratified k folds over ``train_indices``; returns (fit, validate) pairs.

    Each class is shuffled and dealt round-robin, continuing the fold counter
    across classes so fold sizes differ by at most one.
    """
    train_indices = np.asarray(train_indices, dtype=np.int64)
    y = np.asarray(labels).astype(np.int64)[train_indices]
    rng = stream_rng(seed, "kfold")
    assign = np.empty(len(train_indices), dtype=np.int64)
    offset = 0
    for c in np.unique(y):
        members = np.nonzero(y == c)[0]
        if len(members) < k:
            raise ConfigurationError(
                f"class {c} has {len(members)} training samples, fewer than k={k}; use a smaller k"
            )
        perm = rng.permutation(members)
        assign[perm] = (offset + np.arange(len(perm))) % k
        offset += len(perm)
    folds = []
    for f in range(k):
        val = np.sort(train_indices[assign == f])
        fit = np.sort(train_indices[assign != f])
        folds.append((fit, val))
    return folds


# --------------------------------------------------------------- metrics


def roc_auc(scores, labels):
    """Threshold-sweep ROC points and the Mann-Whitney AUC (ties count 1/2).

    Points run from (0, 0) at threshold +inf to (1, 1), one per distinct score.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(np.int64).ravel()
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("ROC/AUC undefined: test labels contain a single class")
    ranks = rankdata(s)
    auc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    distinct = np.nonzero(np.diff(s_sorted))[0]
    ends = np.concatenate([distinct, [len(s) - 1]])
    tp = np.cumsum(y_sorted)[ends]
    fp = (ends + 1) - tp
    points = [(0.0, 0.0, math.inf)]
    points += [(fp[i] / n_neg, tp[i] / n_pos, float(s_sorted[e])) for i, e in enumerate(ends)]
    return points, float(auc)


def trapezoid_auc(points) -> float:
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def confusion(y_true, y_pred):
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    tp = int(np.sum(y_true & y_pred))
    tn = int(np.sum(~y_true & ~y_pred))
    fp = int(np.sum(~y_true & y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    return tp, fn, tn, fp


def metrics_from_confusion(tp, fn, tn, fp) -> dict:
    n = tp + fn + tn + fp
    if tp + fn == 0:
        raise MetricUndefinedError("recall undefined: no positive samples")
    if tn + fp == 0:
        raise MetricUndefinedError("specificity undefined: no negative samples")
    return {
        "accuracy": (tp + tn) / n,
        # no predicted positives: precision reported as 0
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "recall": tp / (tp + fn),
        "specificity": tn / (tn + fp),
    }


def binary_metrics(probs, labels, threshold: float = THRESHOLD) -> dict:
    probs = np.asarray(probs, dtype=np.float64)
    pred = probs >= threshold
    out = metrics_from_confusion(*confusion(labels, pred))
    out["auc"] = roc_auc(probs, labels)[1]
    return {m: float(out[m]) for m in METRICS}


# ----------------------------------------------------------- grid search


def expand_grid(grid: dict) -> list[tuple[int, float, int]]:
    """Grid cells sorted by tie-break priority: n_estimators, max_depth, learning_rate."""
    for key in ("max_depth", "learning_rate", "n_estimators"):
        if not grid.get(key):
            raise ConfigurationError(f"grid axis {key!r} is empty")
    cells = itertools.product(grid["max_depth"], grid["learning_rate"], grid["n_estimators"])
    return sorted(((int(d), float(lr), int(n)) for d, lr, n in cells), key=lambda c: (c[2], c[0], c[1]))


@dataclass
class FoldResult:
    fold: int
    config: GBTConfig
    validation_accuracy: float
    model: GBTModel
    fit_indices: np.ndarray
    validation_indices: np.ndarray
    cell_accuracies: dict = field(default_factory=dict)


def _accuracy(margin, y):
    return float(np.mean((sigmoid(margin) >= THRESHOLD) == (y == 1)))


def _search_fold(f, x, y, fit, val, cells, base, gbt_seed, feature_names):
    xf, yf, xv, yv = x[fit], y[fit], x[val], y[val]
    acc = {}
    models = {}
    for depth, lr in sorted({(c[0], c[1]) for c in cells}):
        checkpoints = {c[2] for c in cells if c[0] == depth and c[1] == lr}
        cfg = GBTConfig(max_depth=depth, learning_rate=lr, n_estimators=max(checkpoints),
                        min_samples_leaf=base.min_samples_leaf,
                        feature_subsample=base.feature_subsample, seed=gbt_seed,
                        reg_lambda=base.reg_lambda)
        rate = yf.mean()
        margin = np.full(len(xv), np.log(rate / (1.0 - rate)))

        def record(r, tree, depth=depth, lr=lr, checkpoints=checkpoints, margin=margin):
            margin += lr * tree.predict(xv)
            if r + 1 in checkpoints:
                acc[(depth, lr, r + 1)] = _accuracy(margin, yv)

        models[(depth, lr)] = gbt_train(xf, yf, cfg, feature_names=feature_names, callback=record)
    # cells are in tie-break order and max() keeps the first maximum
    best = max(cells, key=lambda c: acc[c])
    model = models[(best[0], best[1])].truncated(best[2])
    return FoldResult(f, model.config, acc[best], model, fit, val,
                      {f"{d}/{lr:g}/{n}": a for (d, lr, n), a in acc.items()})


def grid_search(x, y, grid: dict = DEFAULT_GRID, k: int = 10, seed: int = 0, train_indices=None,
                base_config: GBTConfig | None = None, feature_names=None, jobs: int = 1) -> list[FoldResult]:
    """Per fold, pick the grid cell with the best validation accuracy.

    Models sharing (max_depth, learning_rate) are prefixes of one another,
    so each pair is trained once at its largest n_estimators and scored at
    every checkpoint. Folds run in ``jobs`` worker processes; results are
    returned in fold order regardless.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    if train_indices is None:
        train_indices = np.arange(len(y))
    cells = expand_grid(grid)
    base = base_config or GBTConfig()
    gbt_seed = stream_seed(seed, "gbt")
    splits = kfold(train_indices, y, k, seed)
    args = [(f, x, y, fit, val, cells, base, gbt_seed, feature_names) for f, (fit, val) in enumerate(splits)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_search_fold, *zip(*args)))
    return [_search_fold(*a) for a in args]


# -------------------------------------------------------------- reports


@dataclass
class CVReport:
    fold_configs: list[dict]
    fold_validation_accuracy: list[float]
    fold_metrics: list[dict]
    summary: dict
    best_fold: int
    roc_points: list[tuple[float, float, float]]
    importance: list[dict]
    meta: dict = field(default_factory=dict)
    top_k: int = 50

    @property
    def n_folds(self) -> int:
        return len(self.fold_metrics)

    def to_json_dict(self) -> dict:
        return {
            "meta": self.meta,
            "n_folds": self.n_folds,
            "folds": [
                {"fold": i, "config": c, "validation_accuracy": v, "test_metrics": m}
                for i, (c, v, m) in enumerate(zip(self.fold_configs, self.fold_validation_accuracy,
                                                  self.fold_metrics))
            ],
            "summary": {m: self.summary[m] for m in METRICS},
            "best_fold": self.best_fold,
            "importance_top": [
                {k: r[k] for k in ("rank", "feature", "total_gain", "split_count", "avg_gain")}
                for r in self.importance[:self.top_k]
            ],
        }


def feature_importance(models, feature_names=None) -> list[dict]:
    """Gain statistics per feature over every split of every model,
    sorted by average gain (descending, then feature index)."""
    if not models:
        raise ValueError("need at least one model")
    total = {}
    count = {}
    for m in models:
        for t in m.trees:
            for f, g in t.splits():
                total[f] = total.get(f, 0.0) + g
                count[f] = count.get(f, 0) + 1
    rows = []
    for f in total:
        name = feature_names[f] if feature_names is not None else f"f{f}"
        rows.append({"feature": name, "index": f, "total_gain": total[f], "split_count": count[f],
                     "avg_gain": total[f] / count[f]})
    rows.sort(key=lambda r: (-r["avg_gain"], r["index"]))
    for i, r in enumerate(rows, start=1):
        r["rank"] = i
    return rows


def nested_test_evaluate(folds: list[FoldResult], x_test, y_test, feature_names=None) -> CVReport:
    """Score each fold model on the test set; mean and population SD per metric."""
    if not folds:
        raise ValueError("no fold models")
    x_test = np.asarray(x_test, dtype=np.float64)
    y_test = np.asarray(y_test).astype(np.int64)
    fold_metrics = []
    probs_by_fold = []
    for fr in folds:
        p = sigmoid(fr.model.margin(x_test))
        probs_by_fold.append(p)
        fold_metrics.append(binary_metrics(p, y_test))
    summary = {}
    for m in METRICS:
        vals = np.array([fm[m] for fm in fold_metrics])
        summary[m] = {"mean": float(vals.mean()), "sd": float(vals.std())}
    val_acc = [fr.validation_accuracy for fr in folds]
    best = int(np.argmax(val_acc))
    roc_points, _ = roc_auc(probs_by_fold[best], y_test)
    configs = [{"max_depth": fr.config.max_depth, "learning_rate": fr.config.learning_rate,
                "n_estimators": fr.config.n_estimators} for fr in folds]
    return CVReport(configs, val_acc, fold_metrics, summary, best, roc_points,
                    feature_importance([fr.model for fr in folds], feature_names))


def run_protocol(x, y, grid: dict = DEFAULT_GRID, k: int = 10, seed: int = 0, test_fraction: float = 0.2,
                 feature_names=None, base_config: GBTConfig | None = None, standardize: bool = True,
                 jobs: int = 1):
    """Split, standardise on train, grid-search the folds, evaluate on test."""
    from .pipeline import zscore_arrays

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    train, test = stratified_split(y, test_fraction, seed)
    if standardize:
        (xtr, xte), _ = zscore_arrays(x[train], x[test])
        x = x.copy()
        x[train], x[test] = xtr, xte
    folds = grid_search(x, y, grid, k, seed, train_indices=train, base_config=base_config,
                        feature_names=feature_names, jobs=jobs)
    report = nested_test_evaluate(folds, x[test], y[test], feature_names)
    report.meta.update({"seed": int(seed), "k": int(k), "test_fraction": test_fraction,
                        "n_train": int(len(train)), "n_test": int(len(test)),
                        "n_features": int(x.shape[1]),
                        "grid": {a: list(v) for a, v in grid.items()}})
    return report, folds, (train, test)


def write_report_json(path, report: CVReport):
    Path(path).write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")


def write_roc_csv(path, points):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in points:
            w.writerow([repr(float(fpr)), repr(float(tpr)), repr(float(thr))])


def write_importance_csv(path, rows, top_k: int = 50):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "feature", "total_gain", "split_count", "avg_gain"])
        for r in rows[:top_k]:
            w.writerow([r["rank"], r["feature"], repr(r["total_gain"]), r["split_count"], repr(r["avg_gain"])])


def config_dict(c: GBTConfig) -> dict:
    return asdict(c)
