"""Binary classification metrics: accuracy, positive-class F1 and ROC AUC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

__all__ = ["EvalBatch", "confusion", "accuracy", "f1", "auc"]


@dataclass(frozen=True)
class EvalBatch:
    """Positive-class probabilities and 0/1 labels of equal length."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1)
        if scores.size == 0:
            raise ValueError("empty evaluation batch")
        if scores.shape != labels.shape:
            raise ValueError(f"{scores.size} scores vs {labels.size} labels")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        if np.any(scores < 0) or np.any(scores > 1) or not np.all(np.isfinite(scores)):
            raise ValueError("scores must be probabilities in [0, 1]")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))


def confusion(b: EvalBatch, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """``(tp, fp, fn, tn)`` with ``score >= threshold`` predicting the positive class."""
    pred = b.scores >= threshold
    pos = b.labels == 1
    return (
        int(np.sum(pred & pos)),
        int(np.sum(pred & ~pos)),
        int(np.sum(~pred & pos)),
        int(np.sum(~pred & ~pos)),
    )


def accuracy(b: EvalBatch, threshold: float = 0.5) -> float:
    tp, _, _, tn = confusion(b, threshold)
    return (tp + tn) / b.labels.size


def f1(b: EvalBatch, threshold: float = 0.5) -> float:
    """F1 of the positive class, ``2TP / (2TP + FP + FN)``; 0.0 when that denominator is 0."""
    tp, fp, fn, _ = confusion(b, threshold)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def auc(b: EvalBatch) -> float:
    """Area under the ROC curve via the Mann-Whitney rank sum (ties share ranks)."""
    pos = b.labels == 1
    n_pos = int(pos.sum())
    n_neg = b.labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when only one class is present")
    ranks = rankdata(b.scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
