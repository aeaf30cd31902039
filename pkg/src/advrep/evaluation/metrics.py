"""Accuracy, ROC AUC, soft voting and seed aggregation."""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)


def accuracy(preds, labels) -> float:
    """Percentage of positions where ``preds`` equals ``labels``."""
    p = np.asarray(preds)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"accuracy: {p.shape} predictions for {y.shape} labels")
    if p.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return 100.0 * int(np.sum(p == y)) / p.size


def roc_auc_binary(scores, labels) -> float:
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly, ties 1/2."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("roc_auc_binary: scores and labels differ in length")
    pos = s[y == 1]
    neg = np.sort(s[y != 1])
    if pos.size == 0 or neg.size == 0:
        raise ValueError("roc_auc_binary needs both classes present")
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    # twice the Mann-Whitney U: 2 per concordant pair, 1 per tie (exact integer)
    twice_u = int(np.sum(below) * 2 + np.sum(not_above - below))
    return (twice_u / 2) / (pos.size * neg.size)


def multiclass_auc(scores, labels) -> float:
    """Macro one-vs-rest AUC over the classes present in ``labels``.

    ``scores`` is (n, K); column k scores class k. Classes without positives
    are skipped (and logged).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if s.ndim != 2 or s.shape[0] != y.size:
        raise ValueError("multiclass_auc: scores must be (n, K) with one label per row")
    present = np.unique(y)
    if present.size < 2:
        raise ValueError("multiclass_auc needs at least two classes present")
    skipped = sorted(set(range(s.shape[1])) - set(present.tolist()))
    if skipped:
        log.info("multiclass_auc: no positives for class(es) %s, skipped", skipped)
    return float(np.mean([roc_auc_binary(s[:, k], (y == k).astype(int)) for k in present]))


def soft_vote(probs) -> tuple[int, float]:
    """Average chunk probabilities; returns (argmax class, mean PD probability).

    Ties go to the lowest class index.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("soft_vote needs at least one chunk of class probabilities")
    mean = p.mean(axis=0)
    return int(np.argmax(mean)), float(mean[1] if mean.size > 1 else mean[0])


def aggregate_seeds(values) -> tuple[float, float]:
    """Mean and population standard deviation (divisor n)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("aggregate_seeds of no values")
    return float(v.mean()), float(v.std())


def format_mean_std(mean: float, std: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"
