"""Ordinal-classification metrics: accuracy, quadratic weighted kappa,
and their average, computed in float64 from integer confusion counts.

QWK uses the quadratic penalty W[i,j] = (i-j)^2/(C-1)^2 and the
chance-agreement expectation E[i,j] = rowsum_i * colsum_j / n; when the
weighted expectation sums to zero (all mass on one class in both
marginals) the statistic is undefined and an explicit error is raised
rather than imputing a value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedMetric(ValueError):
    """Raised when a metric has no defined value for the given counts."""


@dataclass
class ConfusionMatrix:
    """C x C observed counts; rows are true classes, columns predicted."""
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {counts.shape}")
        if counts.shape[0] < 2:
            raise ValueError("confusion matrix needs at least 2 classes")
        if np.any(counts < 0):
            raise ValueError("confusion counts must be non-negative")
        self.counts = counts.astype(np.int64)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Associative accumulation; merging order never matters."""
        if other.counts.shape != self.counts.shape:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def confusion(true_labels, pred_labels, num_classes: int) -> ConfusionMatrix:
    """Count (true, predicted) pairs into a num_classes^2 table."""
    true_labels = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    pred_labels = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    if true_labels.shape != pred_labels.shape:
        raise ValueError(
            f"label lists differ in length: {true_labels.size} vs {pred_labels.size}")
    for name, labels in (("true", true_labels), ("pred", pred_labels)):
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"{name} labels outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true_labels, pred_labels), 1)
    return ConfusionMatrix(counts)


def accuracy(cm: ConfusionMatrix) -> float:
    """trace / n."""
    if cm.n == 0:
        raise UndefinedMetric("accuracy undefined for an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.n


def qwk(cm: ConfusionMatrix) -> float:
    """1 - (sum W*O) / (sum W*E) with quadratic ordinal weights."""
    if cm.n == 0:
        raise UndefinedMetric("qwk undefined for an empty confusion matrix")
    c = cm.num_classes
    idx = np.arange(c, dtype=np.float64)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (c - 1) ** 2
    observed = cm.counts.astype(np.float64)
    row = observed.sum(axis=1)
    col = observed.sum(axis=0)
    expected = np.outer(row, col) / cm.n
    denom = float((weights * expected).sum())
    if denom == 0.0:
        raise UndefinedMetric(
            "qwk undefined: degenerate marginals (all mass on one class)")
    return 1.0 - float((weights * observed).sum()) / denom


def avg_metric(acc: float, kappa: float) -> float:
    """Arithmetic mean of ACC and QWK."""
    return 0.5 * (acc + kappa)
