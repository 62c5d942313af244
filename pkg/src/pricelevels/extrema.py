"""Local price extrema over a centered tick window.

A tick is a maximum when its price is strictly above every other price
within ``window // 2`` ticks on either side. A flat top (a run of equal
prices) counts once, at its middle sample, and the run itself is excluded
from the comparison. Minima are the maxima of the negated series. Peaks
whose window would cross either end of the series are dropped.

Prominence and width follow the usual peak-geometry definitions with the
flanks bounded by the detection window: prominence is the drop from the
peak to the higher of the two flank minima, and width is measured where the
horizontal line ``peak - rel_height * prominence`` meets the price path,
interpolating linearly between ticks.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tickdata import TickSeries

__all__ = [
    "Side",
    "PriceLevel",
    "ShortSeriesWarning",
    "find_local_extrema",
    "compute_prominence",
    "compute_width",
    "write_levels",
    "read_levels",
]

DEFAULT_WINDOW = 500
DEFAULT_WIDTH_BOUNDS = (100, 400)


class Side(str, Enum):
    MAXIMUM = "max"
    MINIMUM = "min"

    @property
    def sign(self) -> int:
        """+1 for a maximum, -1 for a minimum; "beyond the level" is ``level + sign * k``."""
        return 1 if self is Side.MAXIMUM else -1


@dataclass(frozen=True)
class PriceLevel:
    side: Side
    peak_index: int
    level_price: int
    width: int
    prominence: int
    width_height: float
    formation_span: tuple[int, int]
    confirmed_index: int
    """First tick at which the whole detection window has been observed."""


class ShortSeriesWarning(UserWarning):
    pass


class _RangeTable:
    """Sparse table answering range min/max over a static array in O(1)."""

    def __init__(self, x: np.ndarray, op):
        self.op = op
        self.levels = [x]
        k = 1
        while 2 * k <= len(x):
            prev = self.levels[-1]
            self.levels.append(op(prev[:-k], prev[k:]))
            k *= 2

    def query(self, lo: np.ndarray, hi: np.ndarray, empty):
        """Reduce x[lo..hi] (inclusive) elementwise; ``empty`` where lo > hi."""
        lo = np.asarray(lo, np.int64)
        hi = np.asarray(hi, np.int64)
        out = np.full(lo.shape, empty, dtype=np.float64)
        ok = lo <= hi
        if not ok.any():
            return out
        l, h = lo[ok], hi[ok]
        span = h - l + 1
        j = np.floor(np.log2(span)).astype(np.int64)
        res = np.empty(len(l), np.float64)
        for level in np.unique(j):
            sel = j == level
            tab = self.levels[level]
            res[sel] = self.op(tab[l[sel]], tab[h[sel] - (1 << level) + 1])
        out[ok] = res
        return out


def _nearest_min_index(x: np.ndarray, start: int, stop: int, step: int, value: float) -> int:
    """First index reached from ``start`` towards ``stop`` (exclusive) holding ``value``."""
    seg = x[start:stop:step] if step > 0 else x[start:(None if stop < 0 else stop):step]
    return start + step * int(np.flatnonzero(seg == value)[0])


def _crossings(x: np.ndarray, peak: int, height: float, left_base: int, right_base: int):
    i = peak
    while left_base < i and height < x[i]:
        i -= 1
    left = float(i)
    if x[i] < height:
        left += (height - x[i]) / (x[i + 1] - x[i])
    i = peak
    while i < right_base and height < x[i]:
        i += 1
    right = float(i)
    if x[i] < height:
        right -= (height - x[i]) / (x[i - 1] - x[i])
    return left, right


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _detect_maxima(x: np.ndarray, half: int, rel_height: float):
    """Yield (peak, value, prominence, width, height, left_ip, right_ip) for window maxima of x."""
    n = len(x)
    if n < 3:
        return
    change = np.flatnonzero(np.diff(x) != 0)
    run_start = np.r_[0, change + 1]
    run_end = np.r_[change, n - 1]
    vals = x[run_start]
    if len(vals) < 3:
        return
    inner = np.zeros(len(vals), bool)
    inner[1:-1] = (vals[1:-1] > vals[:-2]) & (vals[1:-1] > vals[2:])
    a, b, v = run_start[inner], run_end[inner], vals[inner]
    m = (a + b) // 2
    fits = (m - half >= 0) & (m + half <= n - 1)
    a, b, v, m = a[fits], b[fits], v[fits], m[fits]
    if not len(m):
        return
    xf = x.astype(np.float64)
    tmax = _RangeTable(xf, np.maximum)
    tmin = _RangeTable(xf, np.minimum)
    lo, hi = m - half, m + half
    dominant = (tmax.query(lo, a - 1, -np.inf) < v) & (tmax.query(b + 1, hi, -np.inf) < v)
    a, b, v, m, lo, hi = (arr[dominant] for arr in (a, b, v, m, lo, hi))
    lmin = np.minimum(tmin.query(lo, a - 1, np.inf), v)
    rmin = np.minimum(tmin.query(b + 1, hi, np.inf), v)
    prom = v - np.maximum(lmin, rmin)
    for k in range(len(m)):
        peak, val = int(m[k]), float(v[k])
        # bases: the flank minimum closest to the peak (peak itself if the flank is empty)
        lb = peak if lmin[k] == val else _nearest_min_index(xf, int(a[k]) - 1, int(lo[k]) - 1, -1, lmin[k])
        rb = peak if rmin[k] == val else _nearest_min_index(xf, int(b[k]) + 1, int(hi[k]) + 1, 1, rmin[k])
        height = val - rel_height * float(prom[k])
        left, right = _crossings(xf, peak, height, lb, rb)
        yield peak, val, float(prom[k]), right - left, height, left, right


def find_local_extrema(series, window: int = DEFAULT_WINDOW,
                       width_bounds: tuple[int, int] = DEFAULT_WIDTH_BOUNDS,
                       rel_height: float = 0.5) -> list[PriceLevel]:
    """Detect window maxima and minima, keeping those whose width lies in ``width_bounds``.

    ``series`` is a :class:`TickSeries` or a 1-D array of scaled prices.
    A series shorter than the window yields no levels and a
    :class:`ShortSeriesWarning`.
    """
    prices = series.price if isinstance(series, TickSeries) else np.asarray(series)
    prices = prices.astype(np.int64)
    if window < 3:
        raise ValueError("window must be at least 3 ticks")
    if len(prices) < window:
        warnings.warn(f"series of {len(prices)} ticks is shorter than the {window}-tick window",
                      ShortSeriesWarning, stacklevel=2)
        return []
    half = window // 2
    lo_w, hi_w = width_bounds
    levels = []
    for side, sign in ((Side.MAXIMUM, 1), (Side.MINIMUM, -1)):
        for peak, val, prom, width, height, left, right in _detect_maxima(sign * prices, half, rel_height):
            w = _round_half_up(width)
            if prom < 1 or not lo_w <= w <= hi_w:
                continue
            levels.append(PriceLevel(
                side=side,
                peak_index=peak,
                level_price=int(sign * val),
                width=w,
                prominence=int(prom),
                width_height=sign * height,
                formation_span=(int(math.ceil(left)), int(math.floor(right))),
                confirmed_index=peak + half,
            ))
    levels.sort(key=lambda lv: (lv.peak_index, lv.side is Side.MINIMUM))
    return levels


def _plateau(x: np.ndarray, i: int) -> tuple[int, int]:
    a = i
    while a > 0 and x[a - 1] == x[i]:
        a -= 1
    b = i
    while b < len(x) - 1 and x[b + 1] == x[i]:
        b += 1
    return a, b


def _flank_bases(x: np.ndarray, peak: int, wlen: int | None):
    if not 0 <= peak < len(x):
        raise IndexError(f"peak index {peak} out of range")
    a, b = _plateau(x, peak)
    if a == 0 or b == len(x) - 1 or x[a - 1] >= x[peak] or x[b + 1] >= x[peak]:
        raise ValueError(f"index {peak} is not a local maximum")
    lo = 0 if wlen is None else max(0, peak - wlen // 2)
    hi = len(x) - 1 if wlen is None else min(len(x) - 1, peak + wlen // 2)
    v = x[peak]
    bases = []
    for start, stop, step in ((a - 1, lo - 1, -1), (b + 1, hi + 1, 1)):
        best, base = v, peak
        i = start
        while i != stop and x[i] < v:
            if x[i] < best:
                best, base = x[i], i
            i += step
        bases.append((best, base))
    (lmin, lb), (rmin, rb) = bases
    return v - max(lmin, rmin), lb, rb


def compute_prominence(prices, peak_index: int, wlen: int | None = None) -> float:
    """Drop from the peak to its key saddle.

    Each flank is scanned outward from the peak's plateau until a price at
    least as high as the peak (or the ``wlen`` bound); the higher of the two
    flank minima is the saddle.
    """
    x = np.asarray(prices, dtype=np.float64)
    prom, _, _ = _flank_bases(x, peak_index, wlen)
    return prom


def compute_width(prices, peak_index: int, rel_height: float = 0.5, prominence: float | None = None,
                  wlen: int | None = None) -> tuple[int, float]:
    """Width in whole ticks at ``peak - rel_height * prominence``, and that height."""
    x = np.asarray(prices, dtype=np.float64)
    prom, lb, rb = _flank_bases(x, peak_index, wlen)
    if prominence is not None:
        prom = prominence
    height = x[peak_index] - rel_height * prom
    left, right = _crossings(x, peak_index, height, lb, rb)
    return _round_half_up(right - left), float(height)


LEVEL_COLUMNS = ("peak_index", "side", "level_price", "width", "prominence", "width_height", "span_start",
                 "span_end", "confirmed_index")


def write_levels(levels: list[PriceLevel], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEVEL_COLUMNS)
        for lv in levels:
            w.writerow([lv.peak_index, lv.side.value, lv.level_price, lv.width, lv.prominence,
                        repr(float(lv.width_height)), lv.formation_span[0], lv.formation_span[1],
                        lv.confirmed_index])


def read_levels(path) -> list[PriceLevel]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
        fh.seek(0)
        header = next(csv.reader(fh), [])
    missing = [c for c in LEVEL_COLUMNS if c not in header]
    if missing:
        raise ValueError(f"{path}: missing level columns {missing}")
    return [PriceLevel(Side(r["side"]), int(r["peak_index"]), int(r["level_price"]), int(r["width"]),
                       int(r["prominence"]), float(r["width_height"]),
                       (int(r["span_start"]), int(r["span_end"])), int(r["confirmed_index"])) for r in rows]
