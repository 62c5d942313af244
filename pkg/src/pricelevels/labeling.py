"""Cross / rebound outcome labels for approached price levels."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .dataset import Dataset
from .extrema import PriceLevel
from .features import Approach, FeatureVector
from .tickdata import TickSeries

__all__ = ["Label", "LabeledLevel", "label_level", "label_features", "build_dataset",
           "NoPositivesWarning", "scan_outcome", "label_dataset"]


class Label(IntEnum):
    CROSS = 0
    REBOUND = 1
    UNDETERMINED = -1


class NoPositivesWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LabeledLevel:
    features: FeatureVector | None
    level: PriceLevel
    approach: Approach
    label: Label
    rebound_ticks: int
    outcome_index: int | None


def label_level(series: TickSeries, level: PriceLevel, approach: Approach, cross_ticks: int = 3,
                rebound_ticks: int = 15) -> tuple[Label, int | None]:
    """Scan forward from the touch tick until one outcome fires.

    Cross: the price gets ``cross_ticks`` or more beyond the level (above a
    maximum, below a minimum). Rebound: it gets ``rebound_ticks`` or more
    away on the other side. A tick satisfying both counts as a cross.
    """
    return scan_outcome(series.price, level.side.sign, level.level_price, approach.touch_index,
                        cross_ticks, rebound_ticks)


def scan_outcome(prices: np.ndarray, sign: int, level_price: int, touch_index: int,
                 cross_ticks: int = 3, rebound_ticks: int = 15) -> tuple[Label, int | None]:
    """:func:`label_level` on raw arrays; ``sign`` is +1 for a maximum, -1 for a minimum."""
    if cross_ticks < 1 or rebound_ticks < 1:
        raise ValueError("cross_ticks and rebound_ticks must be positive")
    rel = sign * (np.asarray(prices[touch_index:], dtype=np.int64) - level_price)
    cross = np.flatnonzero(rel >= cross_ticks)
    rebound = np.flatnonzero(rel <= -rebound_ticks)
    first_cross = int(cross[0]) if cross.size else None
    first_rebound = int(rebound[0]) if rebound.size else None
    if first_cross is None and first_rebound is None:
        return Label.UNDETERMINED, None
    if first_rebound is None or (first_cross is not None and first_cross <= first_rebound):
        return Label.CROSS, touch_index + first_cross
    return Label.REBOUND, touch_index + first_rebound


def label_features(series: TickSeries, vectors: list[FeatureVector], cross_ticks: int = 3,
                   rebound_ticks: int = 15) -> list[LabeledLevel]:
    out = []
    for fv in vectors:
        label, idx = label_level(series, fv.level, fv.approach, cross_ticks, rebound_ticks)
        out.append(LabeledLevel(fv, fv.level, fv.approach, label, rebound_ticks, idx))
    return out


def build_dataset(labeled: list[LabeledLevel], instrument: str = "") -> Dataset:
    """Drop undetermined levels and stack the rest into a chronological dataset (rebound = 1)."""
    kept = [lv for lv in labeled if lv.label is not Label.UNDETERMINED and lv.features is not None]
    if not kept:
        raise ValueError("no determined levels left to build a dataset from")
    kept.sort(key=lambda lv: (lv.approach.approach_index, lv.features.level_id))
    names = kept[0].features.names
    if any(lv.features.names != names for lv in kept):
        raise ValueError("feature vectors disagree on the feature layout")
    X = np.vstack([lv.features.values for lv in kept])
    y = np.array([int(lv.label) for lv in kept], dtype=np.int8)
    meta = {
        "level_id": np.array([lv.features.level_id for lv in kept], np.int64),
        "peak_index": np.array([lv.level.peak_index for lv in kept], np.int64),
        "side": np.array([lv.level.side.sign for lv in kept], np.int64),
        "level_price": np.array([lv.level.level_price for lv in kept], np.int64),
        "touch_index": np.array([lv.approach.touch_index for lv in kept], np.int64),
        "approach_index": np.array([lv.approach.approach_index for lv in kept], np.int64),
        "outcome_index": np.array([lv.outcome_index for lv in kept], np.int64),
    }
    ds = Dataset(X, y, list(names), chronological=True, meta=meta, instrument=instrument)
    if ds.n_positive == 0:
        warnings.warn("dataset has no rebound (positive) levels", NoPositivesWarning, stacklevel=2)
    return ds


def label_dataset(series: TickSeries, features: Dataset, cross_ticks: int = 3, rebound_ticks: int = 15) -> Dataset:
    """Label an unlabeled feature table using its ``side``, ``level_price`` and ``touch_index`` columns.

    Undetermined rows are dropped; ``outcome_index`` is added to the metadata.
    """
    for col in ("side", "level_price", "touch_index"):
        if col not in features.meta:
            raise ValueError(f"feature table lacks the '{col}' column")
    keep, y, outcome = [], [], []
    for i in range(len(features)):
        label, idx = scan_outcome(series.price, int(features.meta["side"][i]), int(features.meta["level_price"][i]),
                                  int(features.meta["touch_index"][i]), cross_ticks, rebound_ticks)
        if label is Label.UNDETERMINED:
            continue
        keep.append(i)
        y.append(int(label))
        outcome.append(idx)
    keep = np.array(keep, dtype=np.int64)
    meta = {k: v[keep] for k, v in features.meta.items()}
    meta["outcome_index"] = np.array(outcome, dtype=np.int64)
    ds = Dataset(features.X[keep], np.array(y, dtype=np.int8), list(features.feature_names), features.chronological,
                 meta, features.instrument)
    if len(ds) and ds.n_positive == 0:
        warnings.warn("dataset has no rebound (positive) levels", NoPositivesWarning, stacklevel=2)
    return ds
