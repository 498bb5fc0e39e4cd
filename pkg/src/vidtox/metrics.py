"""Accuracy, support-weighted F1 and Welch's two-sample t-test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import betainc


def _pair(y_true, y_pred):
    t = np.asarray(y_true, dtype=np.int64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.size} true labels vs {p.size} predictions")
    if t.size == 0:
        raise ValueError("need at least one label")
    return t, p


def accuracy(y_true, y_pred) -> float:
    t, p = _pair(y_true, y_pred)
    return float((t == p).mean())


def confusion_matrix(y_true, y_pred, k: int) -> np.ndarray:
    """K x K counts, rows = true class, columns = predicted class."""
    t, p = _pair(y_true, y_pred)
    if t.max() >= k or p.max() >= k or t.min() < 0 or p.min() < 0:
        raise ValueError(f"labels must lie in [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def weighted_f1(y_true, y_pred, k: int) -> float:
    """Per-class F1 averaged with true-class support weights (F1 = 0 when P+R = 0)."""
    cm = confusion_matrix(y_true, y_pred, k)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    total = 0.0
    for c in range(k):
        if support[c] == 0:
            continue
        prec = tp[c] / predicted[c] if predicted[c] else 0.0
        rec = tp[c] / support[c]
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        total += support[c] * f1
    return float(total / support.sum())


@dataclass
class TTestResult:
    t: float
    p: float
    df: float
    diverged: bool = False


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided Welch t-test with Welch-Satterthwaite degrees of freedom.

    Two constant samples give ``t = 0, p = 1`` when equal and ``p = 0`` with
    ``diverged`` set when they differ.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.size < 2 or y.size < 2:
        raise ValueError(f"each sample needs at least 2 values, got {x.size} and {y.size}")
    va, vb = x.var(ddof=1) / x.size, y.var(ddof=1) / y.size
    diff = x.mean() - y.mean()
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, 1.0, float(x.size + y.size - 2))
        return TTestResult(math.copysign(math.inf, diff), 0.0, float(x.size + y.size - 2), diverged=True)
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (x.size - 1) + vb**2 / (y.size - 1))
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestResult(float(t), min(max(p, 0.0), 1.0), float(df))
