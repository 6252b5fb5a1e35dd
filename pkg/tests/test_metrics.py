import csv
import json
import math

import numpy as np
import pytest

from bounded.metrics import (METRIC_NAMES, ConfusionMatrix, confusion, evaluate_cloud, median,
                             median_report, scores, write_pr_csv, write_report_json)


def _naive(tp, fp, fn, tn):
    def div(a, b):
        return a / b if b != 0 else 0.0
    p = div(tp, tp + fp)
    r = div(tp, tp + fn)
    den = math.sqrt(float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return {
        "precision": p, "recall": r,
        "mcc": div(tp * tn - fp * fn, den),
        "f1": div(2 * tp, 2 * tp + fp + fn),
        "accuracy": div(tp + tn, tp + fp + fn + tn),
        "iou": div(tp, tp + fp + fn),
    }


def test_confusion_examples():
    y = np.array([0, 1, 2, 1, 0, 2])
    cm = confusion(y, y, 1)
    assert cm.fp == cm.fn == 0 and cm.tp == 2 and cm.total == 6
    cm = confusion(np.ones(5, int), np.zeros(5, int), 1)
    assert (cm.tp, cm.tn, cm.fp, cm.fn) == (0, 0, 5, 0)
    # sharp predicted on a non-edge point is a true negative for boundary
    cm = confusion([1], [0], 2)
    assert cm == ConfusionMatrix(0, 0, 0, 1)
    with pytest.raises(ValueError):
        confusion([0, 1], [0], 1)
    with pytest.raises(ValueError):
        ConfusionMatrix(-1, 0, 0, 0)


def test_perfect_and_empty():
    assert all(v == 1 for v in scores(ConfusionMatrix(5, 0, 0, 7)).values())
    s = scores(ConfusionMatrix(0, 0, 0, 100))
    assert s == {"precision": 0, "recall": 0, "f1": 0, "iou": 0, "accuracy": 1, "mcc": 0}


def test_table_scale_example():
    s = scores(ConfusionMatrix(248, 752, 173, 8827))
    assert s["precision"] == 0.248
    assert s["recall"] == pytest.approx(248 / 421, rel=1e-15)
    assert round(s["recall"], 3) == 0.589
    assert s["f1"] == pytest.approx(496 / (496 + 752 + 173), rel=1e-14)
    assert s["accuracy"] == pytest.approx(9075 / 10000, rel=1e-15)
    assert s["iou"] == pytest.approx(248 / 1173, rel=1e-15)
    assert s["mcc"] == pytest.approx((248 * 8827 - 752 * 173) / math.sqrt(1000 * 421 * 9579 * 9000), rel=1e-14)


def test_random_matrices_vs_naive(rng):
    for _ in range(1000):
        counts = rng.integers(0, 50, 4) * rng.integers(0, 2, 4)
        cm = ConfusionMatrix(*map(int, counts))
        got, ref = scores(cm), _naive(*map(int, counts))
        for name in METRIC_NAMES:
            assert got[name] == pytest.approx(ref[name], rel=1e-12, abs=1e-15)
            lo = -1 if name == "mcc" else 0
            assert lo <= got[name] <= 1


def test_mcc_extremes():
    assert scores(ConfusionMatrix(10, 0, 0, 10))["mcc"] == 1
    assert scores(ConfusionMatrix(0, 10, 10, 0))["mcc"] == -1


def test_huge_counts_no_overflow():
    s = scores(ConfusionMatrix(10**9, 10**9, 10**9, 10**9))
    assert s["mcc"] == 0 and s["precision"] == 0.5


def test_permutation_invariance(rng):
    pred = rng.integers(0, 3, 1000)
    lab = rng.integers(0, 3, 1000)
    perm = rng.permutation(1000)
    assert evaluate_cloud(pred, lab) == evaluate_cloud(pred[perm], lab[perm])


def test_median_examples():
    assert median([0.2, 0.9, 0.5]) == 0.5
    assert median([0.2, 0.4]) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        median([])
    single = scores(ConfusionMatrix(3, 1, 2, 10))
    assert median_report([single]) == {k: single[k] for k in METRIC_NAMES}
    rep = median_report({"a": {**single, "f1": 0.2}, "b": {**single, "f1": 0.5}, "c": {**single, "f1": 0.9}})
    assert rep["f1"] == 0.5
    with pytest.raises(ValueError):
        median_report([])


def test_evaluate_cloud_and_writers(tmp_path):
    res = evaluate_cloud([0, 1, 1, 2], [0, 1, 0, 2])
    assert res[1]["tp"] == 1 and res[1]["fp"] == 1 and res[1]["support"] == 1
    assert res[2]["f1"] == 1.0
    write_report_json(tmp_path / "r.json", {"x": res[1]})
    assert json.loads((tmp_path / "r.json").read_text())["x"]["tp"] == 1
    write_pr_csv(tmp_path / "pr.csv", [("a", 1, 0.5, 0.25)])
    rows = list(csv.reader((tmp_path / "pr.csv").open()))
    assert rows == [["cloud", "class", "precision", "recall"], ["a", "1", "0.5", "0.25"]]
