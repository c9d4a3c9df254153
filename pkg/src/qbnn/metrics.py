"""Accuracy and uncertainty metrics for regression and classification."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

VAR_FLOOR = 1e-6
PROB_FLOOR = 1e-12
LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


def _vec(x):
    return np.asarray(x, dtype=np.float64).reshape(-1)


def rmse(preds, targets) -> float:
    p, t = _vec(preds), _vec(targets)
    if p.size == 0:
        raise ValueError("rmse of an empty set")
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {t.size} targets")
    return float(np.sqrt(np.mean((t - p) ** 2)))


def nll_regression(mean, variance, targets) -> float:
    """Average Gaussian negative log-likelihood; variances are floored at 1e-6."""
    m, t = _vec(mean), _vec(targets)
    v = np.maximum(_vec(variance), VAR_FLOOR)
    return float(np.mean(0.5 * np.log(v) + (t - m) ** 2 / (2 * v) + LOG_SQRT_2PI))


def _probs(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("expected an (N, K) matrix of probabilities")
    return p


def labels_from_onehot(onehot) -> np.ndarray:
    y = np.asarray(onehot)
    if y.ndim != 2 or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
        raise ValueError("targets are not one-hot rows")
    return y.argmax(axis=1)


def nll_classification(probs, onehot) -> float:
    p = _probs(probs)
    labels_from_onehot(onehot)
    y = np.asarray(onehot, dtype=np.float64)
    logp = np.log(np.maximum(p, PROB_FLOOR))
    return float(-np.mean((y * logp).sum(axis=1)))


def avg_predictive_entropy(probs) -> float:
    """Mean entropy of the predictive distribution, in nats (0 log 0 = 0)."""
    p = _probs(probs)
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(-np.mean(plogp.sum(axis=1)))


@dataclass
class CalibrationBins:
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def _labels(labels, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim == 2:
        y = labels_from_onehot(y)
    return y.astype(np.int64).reshape(-1)


def calibration_bins(probs, labels, bins: int = 10) -> CalibrationBins:
    """Max-probability confidence c goes to bin ceil(c * B) (1-based); c = 0 goes to bin 1."""
    if bins < 1:
        raise ValueError("need at least one bin")
    p = _probs(probs)
    y = _labels(labels, p.shape[1])
    conf = p.max(axis=1)
    pred = p.argmax(axis=1)
    idx = np.clip(np.ceil(conf * bins).astype(np.int64), 1, bins) - 1
    counts = np.bincount(idx, minlength=bins)
    correct = np.bincount(idx, weights=(pred == y).astype(np.float64), minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, correct / counts, 0.0)
        cmean = np.where(counts > 0, conf_sum / counts, 0.0)
    return CalibrationBins(counts, acc, cmean)


def ece(probs, labels, bins: int = 10) -> float:
    cb = calibration_bins(probs, labels, bins)
    w = cb.counts / cb.n
    return float(np.sum(w * np.abs(cb.accuracy - cb.confidence)))


def classification_error(probs, labels) -> float:
    p = _probs(probs)
    y = _labels(labels, p.shape[1])
    return float(np.mean(p.argmax(axis=1) != y))  # argmax takes the lowest index on ties


@dataclass
class MetricsReport:
    rmse: float | None = None
    nll: float | None = None
    ape: float | None = None
    ece: float | None = None
    classification_error: float | None = None

    def items(self):
        for name in ("rmse", "nll", "ape", "ece", "classification_error"):
            v = getattr(self, name)
            if v is not None:
                yield name, v


def regression_report(mean, variance, targets) -> MetricsReport:
    return MetricsReport(rmse=rmse(mean, targets), nll=nll_regression(mean, variance, targets))


def classification_report(probs, onehot=None, bins: int = 10) -> MetricsReport:
    """Without labels (confusion sets) only the entropy is reported."""
    if onehot is None:
        return MetricsReport(ape=avg_predictive_entropy(probs))
    return MetricsReport(
        nll=nll_classification(probs, onehot),
        ape=avg_predictive_entropy(probs),
        ece=ece(probs, onehot, bins),
        classification_error=classification_error(probs, onehot),
    )
