"""Regression and classification metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

LOG_2PI = math.log(2 * math.pi)
ECE_BINS = 15


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("empty input")
    return a, b


def rmse(mean, y) -> float:
    mean, y = _pair(mean, y)
    return float(np.sqrt(np.mean((mean - y) ** 2)))


def mean_gaussian_ll(mean, var, y) -> float:
    mean, y = _pair(mean, y)
    var, _ = _pair(var, y)
    if np.any(var <= 0):
        raise ValueError("variances must be positive")
    return float(np.mean(-0.5 * (LOG_2PI + np.log(var) + (y - mean) ** 2 / var)))


def _probs_labels(probs, labels):
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels).ravel()
    if probs.shape[0] == 0:
        raise ValueError("empty input")
    if probs.shape[0] != labels.size:
        raise ValueError(f"length mismatch: {probs.shape[0]} vs {labels.size}")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("probability rows must sum to 1")
    return probs, labels.astype(int)


def accuracy(probs, labels) -> float:
    probs, labels = _probs_labels(probs, labels)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def ece(probs, labels, bins: int = ECE_BINS) -> float:
    """Confidence-binned calibration error over (lo, hi] bins of equal width."""
    probs, labels = _probs_labels(probs, labels)
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    which = np.searchsorted(edges[1:-1], conf, side="left")
    total = 0.0
    n = conf.size
    for b in range(bins):
        sel = which == b
        k = int(sel.sum())
        if k:
            total += k / n * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)


def incorrect_only_ll(probs, labels) -> tuple[float, bool]:
    """Mean log-probability of the true class over misclassified points.

    Returns (value, empty); ``empty`` is True (and value 0) when every point
    is classified correctly.
    """
    probs, labels = _probs_labels(probs, labels)
    wrong = np.argmax(probs, axis=1) != labels
    if not np.any(wrong):
        return 0.0, True
    p = probs[np.arange(labels.size), labels][wrong]
    with np.errstate(divide="ignore"):
        return float(np.mean(np.log(p))), False


def mean_class_ll(probs, labels) -> float:
    probs, labels = _probs_labels(probs, labels)
    with np.errstate(divide="ignore"):
        return float(np.mean(np.log(probs[np.arange(labels.size), labels])))


@dataclass
class MetricsReport:
    """Metrics on normalized targets; objective per datapoint, higher is better."""

    model: str
    dataset: str
    seed: int
    objective_per_point: float | None = None
    train_rmse: float | None = None
    test_rmse: float | None = None
    train_ll: float | None = None
    test_ll: float | None = None
    train_accuracy: float | None = None
    test_accuracy: float | None = None
    test_ece: float | None = None
    test_incorrect_ll: float | None = None
    incorrect_empty: bool | None = None
    mean_abs_corr: float | None = None
    extra: dict | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}
