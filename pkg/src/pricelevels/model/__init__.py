"""Gradient-boosted tree classifier, scoring and model selection."""

from .gbdt import Ensemble, TrainConfig, Tree, class_weights, fit, predict_at, sigmoid, weighted_logloss
from .metrics import SweepPoint, confidence_sweep, precision_score
from .selection import (DEFAULT_GRID, CVResult, GridResult, RFECVResult, WalkForwardRow, cross_val_precision,
                        cv_splits, expand_grid, grid_search, rfecv, walk_forward)

__all__ = [
    "Ensemble", "TrainConfig", "Tree", "class_weights", "fit", "predict_at", "sigmoid", "weighted_logloss",
    "SweepPoint", "confidence_sweep", "precision_score",
    "DEFAULT_GRID", "CVResult", "GridResult", "RFECVResult", "WalkForwardRow", "cross_val_precision",
    "cv_splits", "expand_grid", "grid_search", "rfecv", "walk_forward",
]
