"""One-vs-rest confusion counts, six scores and median aggregation over clouds.

Every ratio whose denominator is zero is defined as 0, so clouds that lack a
class still produce finite scores.
"""
from __future__ import annotations

import csv
import io as _io
import json
import math
from dataclasses import dataclass

import numpy as np

from .io import atomic_write_bytes

METRIC_NAMES = ("precision", "recall", "mcc", "f1", "accuracy", "iou")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(predictions, labels, positive_class: int) -> ConfusionMatrix:
    """Counts for ``positive_class`` against all other classes."""
    pred = np.asarray(predictions).ravel()
    lab = np.asarray(labels).ravel()
    if pred.shape != lab.shape:
        raise ValueError(f"predictions ({pred.size}) and labels ({lab.size}) differ in length")
    p = pred == positive_class
    t = lab == positive_class
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionMatrix(tp, fp, fn, int(pred.size) - tp - fp - fn)


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


def scores(cm: ConfusionMatrix) -> dict:
    tp, fp, fn, tn = cm.tp, cm.fp, cm.fn, cm.tn
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    # products of counts can overflow int64 on huge clouds; use Python ints
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(den) if den else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "mcc": float(mcc),
        "f1": _ratio(2 * precision * recall, precision + recall),
        "accuracy": _ratio(tp + tn, cm.total),
        "iou": _ratio(tp, tp + fp + fn),
    }


def median(values) -> float:
    """Median with the midpoint convention for an even count."""
    v = sorted(float(x) for x in values)
    if not v:
        raise ValueError("median of an empty sequence")
    mid = len(v) // 2
    return v[mid] if len(v) % 2 else 0.5 * (v[mid - 1] + v[mid])


def median_report(per_cloud_scores) -> dict:
    """Per-metric medians over a list (or name -> scores mapping) of cloud scores."""
    items = list(per_cloud_scores.values()) if isinstance(per_cloud_scores, dict) else list(per_cloud_scores)
    if not items:
        raise ValueError("need at least one cloud")
    return {name: median(s[name] for s in items) for name in METRIC_NAMES}


def evaluate_cloud(predictions, labels, classes=(1, 2)) -> dict:
    """Scores per positive class, keyed by class code; also records class presence."""
    lab = np.asarray(labels)
    out = {}
    for c in classes:
        cm = confusion(predictions, lab, c)
        out[int(c)] = {**scores(cm), "tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn,
                       "support": int(np.count_nonzero(lab == c))}
    return out


def write_report_json(path, report: dict) -> None:
    atomic_write_bytes(path, (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())


def write_pr_csv(path, rows) -> None:
    """Per-cloud precision/recall pairs; rows are (cloud, class, precision, recall)."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cloud", "class", "precision", "recall"])
    for cloud, cls, p, r in rows:
        w.writerow([cloud, cls, repr(float(p)), repr(float(r))])
    atomic_write_bytes(path, buf.getvalue().encode())
