"""Interpolation error metrics. MAPE is a fraction (1.0 means 100%)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


class MetricError(ValueError):
    pass


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise MetricError(f"shape mismatch: {np.shape(pred)} vs {np.shape(truth)}")
    if p.size == 0:
        raise MetricError("no entries to score")
    return p, t


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def mre(pred, truth) -> float:
    p, t = _pair(pred, truth)
    denom = np.sum(np.abs(t))
    if denom == 0:
        raise MetricError("MRE is undefined when every truth value is zero")
    return float(np.sum(np.abs(p - t)) / denom)


def mape(pred, truth, eps: float = 1e-4) -> float:
    if eps <= 0:
        raise MetricError("eps must be positive")
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t) / np.maximum(np.abs(t), eps)))


@dataclass
class MetricSet:
    mae: float
    mre: float
    mape: float
    n_entries: int

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(pred, truth, eps: float = 1e-4) -> MetricSet:
    p, t = _pair(pred, truth)
    try:
        rel = mre(p, t)
    except MetricError:
        rel = float("nan")
    return MetricSet(mae(p, t), rel, mape(p, t, eps), int(p.size))
