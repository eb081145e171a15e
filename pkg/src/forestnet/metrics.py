"""Segmentation metrics: foreground-averaged pixel accuracy and class-balanced Dice."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


def to_labels(pred) -> np.ndarray:
    """Label map from either a label map or H x W x C score maps (argmax)."""
    pred = np.asarray(pred)
    if pred.ndim == 3:
        return np.argmax(pred, axis=2)
    return pred.astype(np.int64)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class
    ignored: int = 0

    @classmethod
    def build(cls, pred, labels, n_classes: int | None = None) -> "ConfusionMatrix":
        p = to_labels(pred).ravel()
        g = np.asarray(labels).ravel().astype(np.int64)
        if p.shape != g.shape:
            raise ValueError("prediction and label map differ in size")
        valid = g >= 0
        if n_classes is None:
            n_classes = int(max(p.max(initial=0), g.max(initial=0))) + 1
            if np.asarray(pred).ndim == 3:
                n_classes = max(n_classes, np.asarray(pred).shape[2])
        idx = g[valid] * n_classes + p[valid]
        counts = np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
        return cls(counts, int((~valid).sum()))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def pixel_accuracy_foreground(pred, labels, background: int | None = 0, n_classes: int | None = None) -> float:
    """Mean per-class recall over foreground classes present in ``labels``."""
    cm = ConfusionMatrix.build(pred, labels, n_classes).counts
    support = cm.sum(axis=1)
    classes = [c for c in range(len(cm)) if c != background]
    absent = [c for c in classes if support[c] == 0]
    if absent:
        warnings.warn("classes %s absent from labels; excluded from the mean" % absent, stacklevel=2)
    present = [c for c in classes if support[c] > 0]
    if not present:
        return float("nan")
    return float(np.mean([cm[c, c] / support[c] for c in present]))


def dice_per_class(pred, labels, n_classes: int | None = None) -> np.ndarray:
    """Per-class Dice; NaN where a class is absent from both prediction and labels."""
    cm = ConfusionMatrix.build(pred, labels, n_classes).counts
    inter = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2.0 * inter / denom, np.nan)


def dice_class_balanced(pred, labels, background: int | None = 0, n_classes: int | None = None) -> float:
    """Unweighted mean Dice over classes present in prediction or labels, background excluded."""
    d = dice_per_class(pred, labels, n_classes)
    keep = [c for c in range(len(d)) if c != background and not np.isnan(d[c])]
    if not keep:
        return float("nan")
    return float(np.mean(d[keep]))


def write_metric_rows(path, rows) -> None:
    """``rows`` of ``(image id, metric, value)``; an aggregate mean per metric is appended."""
    rows = list(rows)
    by_metric = {}
    for _, metric, value in rows:
        by_metric.setdefault(metric, []).append(value)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image", "metric", "value"])
        for r in rows:
            wr.writerow([r[0], r[1], repr(float(r[2]))])
        for metric, vals in by_metric.items():
            wr.writerow(["mean", metric, repr(float(np.nanmean(vals)))])
