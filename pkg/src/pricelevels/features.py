"""Fixed-length feature vectors for detected price levels.

Two groups of features are built per level:

* price-level (PL) features aggregate the ticks inside the level's
  formation span, grouped by distance in steps from the level price towards
  the interior of the peak (below a maximum, above a minimum);
* market-shift (MS) features compare bid/ask balance over a long and a short
  trailing window ending shortly before the price returns to the level.

Offsets that saw no formation ticks are filled with zeros. Ratios with a
zero denominator are guarded: ``x/0`` becomes ``ratio_cap`` and ``0/0``
becomes 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .extrema import PriceLevel, Side
from .tickdata import TickSeries

__all__ = [
    "FeatureConfig",
    "Approach",
    "FeatureVector",
    "feature_names",
    "guarded_ratio",
    "price_level_features",
    "market_shift_features",
    "approach_index_for",
    "extract_features",
]


@dataclass(frozen=True)
class FeatureConfig:
    depth: int = 10
    ratio_depth: int = 3
    long_window: int = 237
    short_window: int = 21
    approach_offset: int = 2
    ratio_cap: float = 100.0


class Approach(NamedTuple):
    touch_index: int
    """First tick after formation within one step of the level (or beyond it)."""
    approach_index: int
    """Tick at which market-shift features are sampled, ``touch_index - offset``."""


@dataclass(frozen=True)
class FeatureVector:
    level_id: int
    level: PriceLevel
    approach: Approach
    names: tuple[str, ...]
    values: np.ndarray

    @property
    def approach_index(self) -> int:
        return self.approach.approach_index


# per-offset sums, in PL0..PL7 order
_OFFSET_SUMS = ("PL0", "PL1", "PL2", "PL3", "PL4", "PL5", "PL6", "PL7")
_OFFSET_RATIOS = ("PL8", "PL9", "PL10")
_TOTALS = ("PL12", "PL13", "PL14", "PL15", "PL16")
_GEOMETRY = ("PL17", "PL18", "PL19", "PL20")
MS_NAMES = ("MS0", "MS1", "MS2", "MS3", "MS4")


def pl_feature_names(cfg: FeatureConfig = FeatureConfig()) -> list[str]:
    names = [f"{code}_{d}" for code in _OFFSET_SUMS for d in range(cfg.depth)]
    names += [f"{code}_{d}" for code in _OFFSET_RATIOS for d in range(cfg.ratio_depth)]
    names += [f"PL11_{d}" for d in range(cfg.depth)]
    return names + list(_TOTALS) + list(_GEOMETRY)


def feature_names(cfg: FeatureConfig = FeatureConfig()) -> list[str]:
    return pl_feature_names(cfg) + list(MS_NAMES)


def guarded_ratio(num, den, cap: float = 100.0):
    """``num / den`` with ``x/0 -> cap`` for x > 0 and ``0/0 -> 1``; works on scalars and arrays."""
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den != 0, num / np.where(den != 0, den, 1.0), np.where(num > 0, cap, 1.0))
    return out if out.ndim else float(out)


def price_level_features(series: TickSeries, level: PriceLevel,
                         cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """PL0..PL20 for one level, laid out as :func:`pl_feature_names`."""
    if cfg.depth < 1:
        raise ValueError("depth must be at least 1")
    if cfg.ratio_depth > cfg.depth:
        raise ValueError("ratio_depth cannot exceed depth")
    lo, hi = level.formation_span
    sl = slice(lo, hi + 1)
    offset = level.side.sign * (level.level_price - series.price[sl])
    keep = (offset >= 0) & (offset < cfg.depth)
    d = offset[keep]

    def per_offset(col: np.ndarray | None) -> np.ndarray:
        weights = None if col is None else col[sl][keep].astype(np.float64)
        return np.bincount(d, weights=weights, minlength=cfg.depth).astype(np.float64)

    vol_bid = per_offset(series.vol_bid)
    vol_ask = per_offset(series.vol_ask)
    trades_bid = per_offset(series.trades_bid)
    trades_ask = per_offset(series.trades_ask)
    ob_bid = per_offset(series.ob_max_bid)
    ob_ask = per_offset(series.ob_max_ask)
    count = per_offset(None)
    volume = vol_bid + vol_ask
    empty = count == 0
    r = cfg.ratio_depth
    cap = cfg.ratio_cap

    def zero_filled(values, sub=slice(None)):
        return np.where(empty[sub], 0.0, values)

    blocks = [volume, vol_bid, vol_ask, trades_bid, trades_ask, ob_bid, ob_ask, count,
              zero_filled(guarded_ratio(vol_bid[:r], vol_ask[:r], cap), slice(0, r)),
              zero_filled(guarded_ratio(trades_bid[:r], trades_ask[:r], cap), slice(0, r)),
              zero_filled(guarded_ratio(ob_bid[:r], ob_ask[:r], cap), slice(0, r)),
              zero_filled(guarded_ratio(volume, count, cap))]
    totals = [vol_ask.sum(), vol_bid.sum(), trades_ask.sum(), trades_bid.sum(), volume.sum()]
    geometry = [1.0 if level.side is Side.MAXIMUM else 0.0, level.width, level.prominence,
                level.width_height]
    return np.concatenate(blocks + [np.array(totals + geometry, dtype=np.float64)])


def market_shift_features(series: TickSeries, approach_index: int,
                          cfg: FeatureConfig = FeatureConfig()) -> np.ndarray | None:
    """MS0..MS4 over trailing windows ending at ``approach_index`` (inclusive).

    Returns None when fewer than ``long_window`` ticks of history exist.
    """
    if approach_index < cfg.long_window or approach_index >= len(series):
        return None
    cap = cfg.ratio_cap

    def ratios(window: int) -> tuple[float, float, float]:
        sl = slice(approach_index - window + 1, approach_index + 1)
        return (guarded_ratio(series.vol_bid[sl].sum(), series.vol_ask[sl].sum(), cap),
                guarded_ratio(series.trades_bid[sl].sum(), series.trades_ask[sl].sum(), cap),
                guarded_ratio(series.ob_max_bid[sl].sum(), series.ob_max_ask[sl].sum(), cap))

    vol_l, trd_l, ob_l = ratios(cfg.long_window)
    vol_s, trd_s, ob_s = ratios(cfg.short_window)
    return np.array([vol_l, trd_l, vol_l - vol_s, trd_l - trd_s, ob_l - ob_s], dtype=np.float64)


def approach_index_for(series: TickSeries, level: PriceLevel, offset_ticks: int = 2) -> Approach | None:
    """First return of the price to the level after it is known, or None.

    The search starts once the formation span has closed and the detection
    window is complete, and late enough that the sampling tick
    (``touch - offset_ticks``) itself lies after confirmation.
    """
    start = max(level.formation_span[1] + 1, level.confirmed_index + offset_ticks)
    if start >= len(series):
        return None
    rel = level.side.sign * (series.price[start:] - level.level_price)
    hits = np.flatnonzero(rel >= -1)
    if not hits.size:
        return None
    touch = start + int(hits[0])
    return Approach(touch, touch - offset_ticks)


def extract_features(series: TickSeries, levels: list[PriceLevel],
                     cfg: FeatureConfig = FeatureConfig()) -> list[FeatureVector]:
    """Feature vectors for every level that is re-approached with enough history."""
    names = tuple(feature_names(cfg))
    out = []
    for level_id, level in enumerate(levels):
        approach = approach_index_for(series, level, cfg.approach_offset)
        if approach is None:
            continue
        ms = market_shift_features(series, approach.approach_index, cfg)
        if ms is None:
            continue
        values = np.concatenate([price_level_features(series, level, cfg), ms])
        out.append(FeatureVector(level_id, level, approach, names, values))
    return out
