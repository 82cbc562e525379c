"""Classification metrics over a pooled confusion matrix, plus online
statistics of cut-gradient norms (the gradient-stability measurements)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class UndefinedMetricError(ValueError):
    """Metric asked of an empty confusion matrix."""


def confusion_matrix(true_labels: np.ndarray, predicted: np.ndarray,
                     n_classes: int) -> np.ndarray:
    """C x C counts, rows = true class, columns = predicted class."""
    if n_classes < 2:
        raise UndefinedMetricError(f"need C >= 2 classes, got {n_classes}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true_labels, predicted), 1)
    return cm


def accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise UndefinedMetricError("empty confusion matrix")
    return float(np.trace(cm) / total)


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean of per-class F1; zero-support classes contribute 0."""
    if cm.sum() == 0:
        raise UndefinedMetricError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def mcc(cm: np.ndarray) -> float:
    """Multiclass Matthews correlation (covariance form); 0 when degenerate."""
    cm = cm.astype(np.float64)
    s = cm.sum()
    c = np.trace(cm)
    t = cm.sum(axis=1)  # true-class counts
    p = cm.sum(axis=0)  # predicted-class counts
    numer = c * s - t @ p
    denom = np.sqrt((s * s - p @ p) * (s * s - t @ t))
    if denom == 0.0:
        return 0.0
    return float(numer / denom)


@dataclass
class GradNormStats:
    """Welford accumulator over L2 norms of batch-mean cut gradients.

    Sample (n-1) standard deviation; std is only reported once two
    observations exist.
    """

    count: int = 0
    mean: float = 0.0
    _m2: float = field(default=0.0, repr=False)

    def record(self, norm: float) -> None:
        self.count += 1
        delta = norm - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (norm - self.mean)

    @property
    def std(self) -> float:
        if self.count < 2:
            return float("nan")
        return float(np.sqrt(self._m2 / (self.count - 1)))


def batch_mean_grad_norm(d_features: np.ndarray) -> float:
    """Norm of the gradient averaged inside the mini-batch."""
    return float(np.linalg.norm(d_features.mean(axis=0)))


def grad_norm_accumulate(stats: GradNormStats, d_features: np.ndarray) -> GradNormStats:
    stats.record(batch_mean_grad_norm(d_features))
    return stats
