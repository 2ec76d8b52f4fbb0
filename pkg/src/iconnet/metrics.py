"""Recording-level aggregation and UA/F1 metrics for the two-class task."""

from dataclasses import dataclass, field

import numpy as np


def confusion_matrix(y_true, y_pred, n_classes=2):
    """Rows are the true class, columns the prediction."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def compute_metrics(confusion):
    """UA (mean per-class recall) and F1 variants from a confusion matrix.

    F1 for a class with no predictions and no members is 0.
    """
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if np.any(cm < 0) or not np.all(np.equal(np.mod(cm, 1), 0)):
        raise ValueError("confusion matrix must hold non-negative integers")
    total = cm.sum()
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return {
        "ua": float(recall.mean()),
        "f1_abnormal": float(f1[1]),
        "f1_macro": float(f1.mean()),
        "f1_weighted": float((f1 * support).sum() / support.sum()),
        "recall": [float(r) for r in recall],
        "precision": [float(p) for p in precision],
    }


def aggregate_by_group(proba, groups):
    """Mean class probabilities per group, groups in order of first appearance."""
    proba = np.asarray(proba, dtype=np.float64)
    groups = np.asarray(groups)
    keys, first, inverse = np.unique(groups, return_index=True, return_inverse=True)
    order = np.argsort(first)
    sums = np.zeros((len(keys), proba.shape[1]))
    np.add.at(sums, inverse, proba)
    counts = np.bincount(inverse, minlength=len(keys))[:, None]
    return keys[order], (sums / counts)[order]


def group_labels(y, groups):
    """Label of each group, in the order used by :func:`aggregate_by_group`."""
    y = np.asarray(y)
    groups = np.asarray(groups)
    keys, first = np.unique(groups, return_index=True)
    order = np.argsort(first)
    labels = y[first[order]]
    for k, lab in zip(keys[order], labels):
        if np.any(y[groups == k] != lab):
            raise ValueError(f"group {k!r} has mixed labels")
    return labels


def unweighted_average_recall(y_true, y_pred, n_classes=2):
    return compute_metrics(confusion_matrix(y_true, y_pred, n_classes))["ua"]


@dataclass
class RecordingPrediction:
    id: str
    truth: int
    predicted: int
    probabilities: tuple


@dataclass
class MetricsReport:
    confusion: np.ndarray
    ua: float
    f1_abnormal: float
    f1_macro: float
    f1_weighted: float
    predictions: list = field(default_factory=list)

    @classmethod
    def from_predictions(cls, predictions):
        truth = [p.truth for p in predictions]
        pred = [p.predicted for p in predictions]
        cm = confusion_matrix(truth, pred)
        m = compute_metrics(cm)
        return cls(cm, m["ua"], m["f1_abnormal"], m["f1_macro"], m["f1_weighted"], list(predictions))

    @property
    def n_evaluated(self):
        return int(self.confusion.sum())

    def as_dict(self):
        return {
            "confusion": self.confusion.tolist(),
            "ua": self.ua,
            "f1_abnormal": self.f1_abnormal,
            "f1_macro": self.f1_macro,
            "f1_weighted": self.f1_weighted,
            "n_test": self.n_evaluated,
        }
