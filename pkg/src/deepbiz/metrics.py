"""Losses, evaluation metrics and paired significance tests."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy import stats

from .errors import ContractError, DegenerateTestError, MetricUndefinedError

LOSS_KINDS = ("zero-one", "l1", "l2", "cross-entropy")
CE_FLOOR = 1e-12


def loss(kind: str, y_pred, y_true) -> float:
    """Mean loss over samples.

    ``zero-one`` accepts predicted labels or probability rows (argmax is taken);
    ``cross-entropy`` needs probability rows and integer class labels.
    """
    y_pred = np.asarray(y_pred, dtype=np.float64)
    y_true = np.asarray(y_true)
    if kind == "zero-one":
        labels = y_pred.argmax(axis=1) if y_pred.ndim == 2 else y_pred
        return float(np.mean(labels != y_true))
    if kind == "l1":
        _check_conformant(y_pred, y_true)
        return float(np.mean(np.abs(y_pred - y_true)))
    if kind == "l2":
        _check_conformant(y_pred, y_true)
        return float(np.mean((y_pred - y_true) ** 2))
    if kind == "cross-entropy":
        return float(np.mean(cross_entropy_per_sample(y_pred, y_true)))
    raise ContractError(f"unknown loss {kind!r}; expected one of {LOSS_KINDS}")


def cross_entropy_per_sample(probs, labels) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ContractError(f"cross-entropy needs (n, classes) probabilities for n labels, "
                            f"got {probs.shape} and {labels.shape}")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(probs < 0):
        raise ContractError("prediction rows must be probability vectors summing to 1")
    picked = probs[np.arange(len(labels)), labels]
    return -np.log(np.maximum(picked, CE_FLOOR))


def _check_conformant(a, b):
    if a.shape != b.shape:
        raise ContractError(f"prediction shape {a.shape} does not match target shape {b.shape}")


def _binary_labels(labels) -> np.ndarray:
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if not np.all(np.isin(uniq, (0, 1))):
        raise ContractError(f"labels must be 0/1, got values {uniq[:5]}")
    if len(uniq) < 2:
        raise MetricUndefinedError("AUC needs both positive and negative samples")
    return labels.astype(bool)


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank sum (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    pos = _binary_labels(labels).ravel()
    if len(scores) != len(pos):
        raise ContractError("scores and labels differ in length")
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    ranks = stats.rankdata(scores)  # average ranks for ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gini(scores, labels) -> float:
    return 2.0 * auc(scores, labels) - 1.0


def gini_from_auc(value: float) -> float:
    return 2.0 * value - 1.0


def regression_metrics(y_pred, y_true):
    """Return ``(mse, mae)`` over all elements."""
    y_pred = np.asarray(y_pred, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.float64)
    if y_pred.size == 0:
        raise ContractError("no samples to score")
    _check_conformant(y_pred, y_true)
    err = y_pred - y_true
    return float(np.mean(err ** 2)), float(np.mean(np.abs(err)))


def paired_significance(losses_a, losses_b) -> float:
    """Two-sided paired t-test p-value on per-sample loss differences."""
    a = np.asarray(losses_a, dtype=np.float64).ravel()
    b = np.asarray(losses_b, dtype=np.float64).ravel()
    if len(a) != len(b):
        raise ContractError("loss vectors differ in length")
    if len(a) < 30:
        raise ContractError(f"need at least 30 paired samples, got {len(a)}")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        if np.all(d == 0.0):
            return 1.0
        raise DegenerateTestError("loss differences are constant and nonzero")
    t = d.mean() / (sd / np.sqrt(len(d)))
    return float(2.0 * stats.t.sf(abs(t), df=len(d) - 1))


def bootstrap_auc_test(scores_a, scores_b, labels, n_resamples: int = 2000, seed: int = 0) -> float:
    """Percentile-bootstrap two-sided p-value for AUC(a) == AUC(b) on shared samples."""
    scores_a = np.asarray(scores_a, dtype=np.float64).ravel()
    scores_b = np.asarray(scores_b, dtype=np.float64).ravel()
    labels = _binary_labels(labels).astype(int).ravel()
    n = len(labels)
    if len(scores_a) != n or len(scores_b) != n:
        raise ContractError("scores and labels differ in length")
    rng = np.random.default_rng(seed)
    diffs = []
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        lab = labels[idx]
        if lab.min() == lab.max():
            continue
        diffs.append(auc(scores_a[idx], lab) - auc(scores_b[idx], lab))
    if not diffs:
        raise DegenerateTestError("no bootstrap resample contained both classes")
    diffs = np.asarray(diffs)
    if np.all(diffs == 0.0):
        return 1.0
    tail = min(np.mean(diffs <= 0.0), np.mean(diffs >= 0.0))
    return float(min(1.0, 2.0 * tail))


@dataclass
class MetricReport:
    values: Dict[str, float]
    n: int
    p_value: Optional[float] = None
    per_sample_losses: Optional[np.ndarray] = field(default=None, repr=False)

    KEYS = ("auc", "gini", "mse", "mae")

    def to_dict(self) -> dict:
        out = {k: self.values[k] for k in self.KEYS if k in self.values}
        out["n"] = self.n
        out["p_value"] = self.p_value
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        doc = json.loads(text)
        values = {k: doc[k] for k in cls.KEYS if k in doc}
        return cls(values, doc["n"], doc.get("p_value"))


def classification_report(scores, labels) -> MetricReport:
    a = auc(scores, labels)
    return MetricReport({"auc": a, "gini": gini_from_auc(a)}, len(labels))


def regression_report(y_pred, y_true) -> MetricReport:
    mse, mae = regression_metrics(y_pred, y_true)
    per_sample = np.mean(np.reshape((np.asarray(y_pred) - np.asarray(y_true)) ** 2, (len(y_true), -1)), axis=1)
    return MetricReport({"mse": mse, "mae": mae}, len(y_true), per_sample_losses=per_sample)
