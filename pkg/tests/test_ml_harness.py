import csv
import json

import numpy as np
import pytest

from brainmarkers.errors import ConfigurationError, MetricUndefinedError, StratificationError
from brainmarkers.gbt import GBTConfig, gbt_train
from brainmarkers.ml_harness import (
    METRICS, binary_metrics, expand_grid, feature_importance, grid_search, kfold, metrics_from_confusion,
    roc_auc, run_protocol, stratified_split, trapezoid_auc, write_importance_csv, write_report_json,
    write_roc_csv,
)

from oracles import auc_pairs

TINY_GRID = {"max_depth": (1, 2), "learning_rate": (0.3,), "n_estimators": (5, 10)}


# ---------------------------------------------------------------- splits


def test_split_10_4():
    y = np.array([1] * 4 + [0] * 6)
    tr, te = stratified_split(y, 0.2, seed=3)
    assert sorted(y[te].tolist()) == [0, 1]
    assert len(np.intersect1d(tr, te)) == 0 and len(tr) + len(te) == 10


def test_split_deterministic():
    y = np.random.default_rng(0).integers(0, 2, 50)
    a, b = stratified_split(y, seed=11), stratified_split(y, seed=11)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


@pytest.mark.parametrize("seed", range(1, 51))
def test_split_proportions(seed):
    rng = np.random.default_rng(seed)
    y = (rng.random(int(rng.integers(20, 120))) < rng.uniform(0.2, 0.8)).astype(int)
    if y.sum() < 3 or (1 - y).sum() < 3:
        y[:3], y[-3:] = 1, 0
    tr, _ = stratified_split(y, 0.2, seed)
    for c in (0, 1):
        n_c = int(np.sum(y == c))
        assert abs(np.mean(y[tr] == c) - np.mean(y == c)) <= 1 / n_c


def test_split_single_class():
    with pytest.raises(StratificationError):
        stratified_split(np.ones(10, int))


def test_kfold_20_balanced():
    y = np.array([0, 1] * 10)
    folds = kfold(np.arange(20), y, 10, seed=0)
    assert len(folds) == 10
    for fit, val in folds:
        assert len(val) == 2 and sorted(y[val].tolist()) == [0, 1]
        assert len(np.intersect1d(fit, val)) == 0 and len(fit) + len(val) == 20
    assert np.array_equal(np.sort(np.concatenate([v for _, v in folds])), np.arange(20))


def test_kfold_subset_and_determinism():
    y = np.random.default_rng(1).integers(0, 2, 80)
    train = np.arange(0, 80, 2)
    a = kfold(train, y, 5, seed=2)
    b = kfold(train, y, 5, seed=2)
    assert all(np.array_equal(p[1], q[1]) for p, q in zip(a, b))
    assert np.array_equal(np.sort(np.concatenate([v for _, v in a])), train)


def test_kfold_too_small_class():
    y = np.array([1] * 5 + [0] * 20)
    with pytest.raises(ConfigurationError, match="smaller k"):
        kfold(np.arange(25), y, 10)


# --------------------------------------------------------------- metrics


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])[1] == 1.0
    assert roc_auc([0.5] * 6, [1, 0, 1, 0, 1, 0])[1] == 0.5


@pytest.mark.parametrize("seed", range(100))
def test_auc_pair_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 50
    y = rng.integers(0, 2, n)
    y[:2] = [0, 1]
    s = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding makes ties
    points, auc = roc_auc(s, y)
    assert abs(auc - auc_pairs(s, y)) <= 1e-12
    assert abs(auc - trapezoid_auc(points)) <= 1e-12
    fpr = [p[0] for p in points]
    tpr = [p[1] for p in points]
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    assert points[0][:2] == (0.0, 0.0) and points[-1][:2] == (1.0, 1.0)


def test_auc_single_class():
    with pytest.raises(MetricUndefinedError):
        roc_auc([0.1, 0.2], [1, 1])


def test_confusion_arithmetic():
    m = metrics_from_confusion(tp=2, fn=1, tn=3, fp=1)
    assert m["precision"] == pytest.approx(2 / 3)
    assert m["recall"] == pytest.approx(2 / 3)
    assert m["specificity"] == pytest.approx(3 / 4)
    assert m["accuracy"] == pytest.approx(5 / 7)


@pytest.mark.parametrize("seed", range(10))
def test_metrics_against_confusion_oracle(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 40)
    y[:2] = [0, 1]
    p = rng.random(40)
    m = binary_metrics(p, y)
    pred = p >= 0.5
    tp = sum(1 for a, b in zip(y, pred) if a == 1 and b)
    tn = sum(1 for a, b in zip(y, pred) if a == 0 and not b)
    assert m["accuracy"] == (tp + tn) / 40
    assert m["specificity"] == tn / int(np.sum(y == 0))
    assert set(m) == set(METRICS)


def test_metric_undefined():
    with pytest.raises(MetricUndefinedError):
        metrics_from_confusion(0, 0, 3, 1)
    with pytest.raises(MetricUndefinedError):
        metrics_from_confusion(1, 1, 0, 0)


# ----------------------------------------------------------- grid search


def test_grid_order_and_tie_break():
    cells = expand_grid({"max_depth": (3, 2), "learning_rate": (0.3, 0.1), "n_estimators": (100, 50)})
    assert cells[0] == (2, 0.1, 50) and cells[-1] == (3, 0.3, 100)
    with pytest.raises(ConfigurationError):
        expand_grid({"max_depth": (), "learning_rate": (0.1,), "n_estimators": (5,)})


def _separable(n=40, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    y = np.array([0, 1] * (n // 2))
    x[:, 0] = np.where(y == 1, 1, -1) * rng.uniform(0.5, 2, n)
    return x, y


def test_single_cell_grid():
    x, y = _separable()
    grid = {"max_depth": (2,), "learning_rate": (0.1,), "n_estimators": (5,)}
    folds = grid_search(x, y, grid, k=10, seed=0)
    assert len(folds) == 10
    assert all(f.config.key() == (2, 0.1, 5) for f in folds)


def test_separable_folds_perfect():
    x, y = _separable()
    folds = grid_search(x, y, TINY_GRID, k=10, seed=1)
    assert all(f.validation_accuracy == 1.0 for f in folds)
    # every cell ties at 1.0, so the cheapest cell wins
    assert all(f.config.key() == (1, 0.3, 5) for f in folds)


def test_prefix_scoring_matches_retraining():
    x, y = _separable(seed=4)
    x[:, 0] += np.random.default_rng(0).normal(scale=1.5, size=len(y))
    folds = grid_search(x, y, TINY_GRID, k=5, seed=2)
    for f in folds:
        for key, acc in f.cell_accuracies.items():
            d, lr, n = key.split("/")
            m = gbt_train(x[f.fit_indices], y[f.fit_indices],
                          GBTConfig(max_depth=int(d), learning_rate=float(lr), n_estimators=int(n),
                                    seed=f.config.seed))
            p = 1 / (1 + np.exp(-m.margin(x[f.validation_indices])))
            assert acc == np.mean((p >= 0.5) == (y[f.validation_indices] == 1))


def test_parallel_folds_match_serial():
    x, y = _separable(seed=5)
    a = grid_search(x, y, TINY_GRID, k=5, seed=3, jobs=1)
    b = grid_search(x, y, TINY_GRID, k=5, seed=3, jobs=2)
    for fa, fb in zip(a, b):
        assert fa.config == fb.config and fa.validation_accuracy == fb.validation_accuracy
        assert np.array_equal(fa.model.margin(x), fb.model.margin(x))


# ------------------------------------------------------------ importance


def test_importance_single_stump():
    x = np.zeros((20, 3))
    x[:, 2] = np.arange(20)
    y = (np.arange(20) >= 10).astype(int)
    m = gbt_train(x, y, GBTConfig(max_depth=1, n_estimators=1))
    rows = feature_importance([m], ["a", "b", "c"])
    assert len(rows) == 1 and rows[0]["feature"] == "c" and rows[0]["rank"] == 1
    assert rows[0]["avg_gain"] == rows[0]["total_gain"] / rows[0]["split_count"]


def test_importance_informative_first():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(100, 8))
    y = (x[:, 0] > 0).astype(int)
    m = gbt_train(x, y, GBTConfig(max_depth=2, n_estimators=20))
    rows = feature_importance([m])
    assert rows[0]["feature"] == "f0"
    assert [r["avg_gain"] for r in rows] == sorted((r["avg_gain"] for r in rows), reverse=True)


# -------------------------------------------------------------- protocol


def test_identical_models_zero_sd():
    x, y = _separable(60)
    grid = {"max_depth": (1,), "learning_rate": (0.3,), "n_estimators": (3,)}
    report, folds, _ = run_protocol(x, y, grid, k=10, seed=0)
    assert report.n_folds == 10
    assert all(report.summary[m]["sd"] == 0.0 for m in METRICS)
    assert all(report.summary[m]["mean"] == 1.0 for m in METRICS)


def test_label_permutation_sanity():
    rng = np.random.default_rng(2024)
    x = rng.normal(size=(60, 10))
    y0 = np.array([0, 1] * 30)
    grid = {"max_depth": (2,), "learning_rate": (0.3,), "n_estimators": (10,)}
    aucs = []
    for rep in range(50):
        y = np.random.default_rng(rep).permutation(y0)
        report, _, _ = run_protocol(x, y, grid, k=10, seed=rep)
        aucs.append(report.summary["auc"]["mean"])
    assert 0.3 <= np.mean(aucs) <= 0.7


def test_report_outputs(tmp_path):
    x, y = _separable(60, seed=2)
    x[:, 0] += np.random.default_rng(1).normal(size=60)
    report, _, _ = run_protocol(x, y, TINY_GRID, k=10, seed=5, feature_names=["a", "b", "c"])
    write_report_json(tmp_path / "r.json", report)
    write_roc_csv(tmp_path / "roc.csv", report.roc_points)
    write_importance_csv(tmp_path / "imp.csv", report.importance, 2)
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["n_folds"] == 10 and len(d["folds"]) == 10
    assert list(d["summary"]) == sorted(METRICS)
    assert all(set(v) == {"mean", "sd"} and v["sd"] >= 0 for v in d["summary"].values())
    rows = list(csv.reader(open(tmp_path / "roc.csv")))
    assert rows[0] == ["fpr", "tpr", "threshold"] and rows[1][:2] == ["0.0", "0.0"]
    imp = list(csv.reader(open(tmp_path / "imp.csv")))
    assert imp[0] == ["rank", "feature", "total_gain", "split_count", "avg_gain"] and len(imp) <= 3


def test_protocol_deterministic():
    x, y = _separable(60, seed=3)
    x += np.random.default_rng(9).normal(size=x.shape)
    a, _, sa = run_protocol(x, y, TINY_GRID, k=10, seed=8)
    b, _, sb = run_protocol(x, y, TINY_GRID, k=10, seed=8)
    assert json.dumps(a.to_json_dict(), sort_keys=True) == json.dumps(b.to_json_dict(), sort_keys=True)
    assert np.array_equal(sa[1], sb[1])
