"""Precision scoring and confidence sweeps."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .gbdt import Ensemble, predict_at

__all__ = ["precision_score", "SweepPoint", "confidence_sweep", "sweep_from_margin"]


def precision_score(labels, predictions) -> float | None:
    """TP / (TP + FP); None when nothing was predicted positive."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape:
        raise ValueError(f"length mismatch: {labels.shape} vs {predictions.shape}")
    predicted = predictions == 1
    n = int(predicted.sum())
    if n == 0:
        return None
    return int((labels[predicted] == 1).sum()) / n


class SweepPoint(NamedTuple):
    threshold: float
    precision: float | None
    n_predicted: int


def sweep_from_margin(margin, labels, thresholds) -> list[SweepPoint]:
    out = []
    for t in thresholds:
        pred = predict_at(margin, float(t))
        out.append(SweepPoint(float(t), precision_score(labels, pred), int(pred.sum())))
    return out


def confidence_sweep(ensemble: Ensemble, X, labels, thresholds) -> list[SweepPoint]:
    """Precision and positive-prediction count at each probability threshold."""
    return sweep_from_margin(ensemble.margin(X), np.asarray(labels), thresholds)
