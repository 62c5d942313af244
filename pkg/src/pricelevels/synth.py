"""Seeded synthetic market events with planted price levels.

The price path is a sequence of episodes. Each episode picks a planted
level price ``P`` and, working in the level's frame (below ``P`` for a
maximum, above it for a minimum):

1. drifts away from ``P`` and idles there long enough to clear the
   detection window;
2. climbs to one step short of ``P``, hovers there, touches ``P`` once and
   falls back by ``depth`` steps, forming a single clean extremum;
3. wanders at least three steps away while the extremum gets confirmed;
4. returns to one step short of ``P`` (the touch) and then either rebounds
   (touches ``P`` and falls ``rebound_target`` steps, never going above
   it) or crosses (rises ``cross_target`` steps beyond it, never falling
   back more than three steps) with the level's rebound probability;
5. drifts freely for a while.

Every path step changes the price, so each step is exactly one tick after
reconstruction. During the ticks leading up to a touch the aggressor whose
side matches the planned outcome (sellers before a rebound off a maximum,
buyers before a cross, mirrored for minima) trades larger sizes, which is
the planted signal for the classifier.

Randomness comes from PCG64 streams seeded through ``SeedSequence(seed)``
(spawn keys 0, 1, 2 for path, episode and order-flow draws). Draws are
consumed as raw 64-bit words and only used through integer arithmetic and
comparisons of ``(raw >> 11) * 2**-53`` against probabilities, so streams are
bit-identical on every platform.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .tickdata import BookSide, EventArray, EventKind

__all__ = ["SynthConfig", "PlantedLevel", "GroundTruth", "generate", "raw_stream", "uniforms",
           "write_ground_truth", "read_ground_truth"]

_FLOW_DRAWS = 24      # raw words consumed per tick by the order-flow pass
_EPISODE_DRAWS = 8    # raw words consumed per episode
_MAX_EXTRA_TRADES = 3
_BOOK_SLOTS = 4


def raw_stream(seed: int, stream: int, n: int) -> np.ndarray:
    """First ``n`` raw 64-bit outputs of stream ``stream`` for ``seed``."""
    ss = np.random.SeedSequence(seed, spawn_key=(stream,))
    return np.random.PCG64(ss).random_raw(n).astype(np.uint64)


def uniforms(raw: np.ndarray) -> np.ndarray:
    """Exact doubles in [0, 1) from the top 53 bits of each raw word."""
    return (np.asarray(raw, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


@dataclass(frozen=True)
class PlantedLevel:
    price: int
    rebound_probability: float


def _default_levels():
    return (PlantedLevel(11260, 0.7), PlantedLevel(11140, 0.7), PlantedLevel(11320, 0.7),
            PlantedLevel(11080, 0.7))


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_ticks: int = 200_000
    base_price: int = 11200
    levels: tuple = field(default_factory=_default_levels)
    reversion: float = 0.3          # drift of directed phases: up-step probability (1 + r) / 2
    gap_probability: float = 0.02   # chance of a two-step move on free ticks
    depth: int = 30                 # steps the path retreats after forming a level
    rebound_target: int = 20
    cross_target: int = 8
    idle_ticks: tuple = (260, 400)
    hover_ticks: tuple = (60, 150)
    wander_ticks: tuple = (300, 600)
    noise_ticks: tuple = (50, 400)
    bias_ticks: int = 200           # ticks before the touch that carry the flow signal
    flow_bias: float = 1.0          # favored aggressor sizes are drawn from a range (1 + flow_bias) times wider
    max_trade_size: int = 5
    book_rate: float = 1.0          # expected book updates per tick, at most 4
    mean_tick_gap_ms: int = 10_000
    start_ns: int = 1_559_512_800 * 1_000_000_000   # 2019-06-02 22:00 UTC
    instrument: str = "SYN"

    def __post_init__(self):
        levels = tuple(lv if isinstance(lv, PlantedLevel) else PlantedLevel(int(lv[0]), float(lv[1]))
                       for lv in self.levels)
        object.__setattr__(self, "levels", levels)
        for name in ("idle_ticks", "hover_ticks", "wander_ticks", "noise_ticks"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be an increasing pair of positive tick counts")
            object.__setattr__(self, name, (int(lo), int(hi)))
        if self.n_ticks < 1:
            raise ValueError("n_ticks must be >= 1")
        if not levels:
            raise ValueError("at least one planted level is required")
        for lv in levels:
            if not 0.0 <= lv.rebound_probability <= 1.0:
                raise ValueError("rebound probabilities must lie in [0, 1]")
        for name in ("reversion", "gap_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.book_rate <= _BOOK_SLOTS:
            raise ValueError(f"book_rate must lie in [0, {_BOOK_SLOTS}]")
        if self.depth < 12:
            raise ValueError("depth must be at least 12 steps")
        if self.rebound_target < 1 or self.cross_target < 1 or self.max_trade_size < 1:
            raise ValueError("targets and max_trade_size must be positive")
        if self.flow_bias < 0 or self.bias_ticks < 0 or self.mean_tick_gap_ms < 1:
            raise ValueError("flow_bias, bias_ticks must be >= 0 and mean_tick_gap_ms >= 1")
        lo = min(min(lv.price for lv in levels), self.base_price) - 4 * self.depth - self.rebound_target
        if lo <= 0:
            raise ValueError("levels too close to zero for the configured depth")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = [[lv.price, lv.rebound_probability] for lv in self.levels]
        d["idle_ticks"], d["hover_ticks"] = list(self.idle_ticks), list(self.hover_ticks)
        d["wander_ticks"], d["noise_ticks"] = list(self.wander_ticks), list(self.noise_ticks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "levels" in d:
            d["levels"] = tuple(PlantedLevel(int(p), float(q)) for p, q in d["levels"])
        for name in ("idle_ticks", "hover_ticks", "wander_ticks", "noise_ticks"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)


@dataclass
class GroundTruth:
    """One row per episode: the planted level and the outcome it was steered to."""
    level_price: np.ndarray
    side: np.ndarray            # +1 maximum, -1 minimum
    rebound_probability: np.ndarray
    rebound: np.ndarray         # 1 rebound, 0 cross
    peak_tick: np.ndarray
    touch_tick: np.ndarray
    outcome_tick: np.ndarray    # -1 when the series ended first
    complete: np.ndarray

    def __len__(self) -> int:
        return len(self.level_price)

    COLUMNS = ("level_price", "side", "rebound_probability", "rebound", "peak_tick", "touch_tick",
               "outcome_tick", "complete")


# phases of the path state machine
_AWAY, _IDLE, _RISE, _HOVER, _PEAK, _FALL, _WANDER, _APPROACH, _TOUCH, _REBOUND, _CROSS, _NOISE = range(12)
_BIG = 1 << 40


@njit(cache=True)
def _unif(raw):
    return np.float64(raw >> np.uint64(11)) * 1.1102230246251565e-16


@njit(cache=True)
def _randint(raw, lo, hi):
    # integer in [lo, hi]
    return lo + np.int64((raw >> np.uint64(11)) % np.uint64(hi - lo + 1))


@njit(cache=True)
def _move(u, p_up, hi, lo, raw_dir, raw_gap, p_gap):
    d = 1 if _unif(raw_dir) < p_up else -1
    size = 2 if _unif(raw_gap) < p_gap else 1
    v = u + d * size
    if v > hi:
        v = u - 1
    elif v < lo:
        v = u + 1
    return v


@njit(cache=True)
def _path(n, base, lv_price, lv_prob, path_raw, ep_raw, rev, p_gap, depth, rebound_target, cross_target,
          idle, hover, wander, noise, bias_ticks):
    prices = np.empty(n, np.int64)
    bias = np.zeros(n, np.int8)
    max_ep = ep_raw.shape[0]
    g_price = np.zeros(max_ep, np.int64)
    g_side = np.zeros(max_ep, np.int64)
    g_prob = np.zeros(max_ep, np.float64)
    g_reb = np.zeros(max_ep, np.int64)
    g_peak = np.full(max_ep, -1, np.int64)
    g_touch = np.full(max_ep, -1, np.int64)
    g_out = np.full(max_ep, -1, np.int64)
    p_drift = (1.0 + rev) / 2.0
    p_away = (1.0 - rev) / 2.0
    half = depth // 2
    quarter = depth // 4

    price = base
    n_ep = 0
    phase = _NOISE
    left = 0            # ticks remaining in timed phases
    s = 1
    P = base
    favored = 0
    wander_start = 0
    for i in range(n):
        if phase == _NOISE and left <= 0:
            if n_ep >= max_ep:
                left = _BIG
            else:
                e = ep_raw[n_ep]
                k = _randint(e[0], 0, lv_price.shape[0] - 1)
                P = lv_price[k]
                s = 1 if price < P else -1
                g_price[n_ep] = P
                g_side[n_ep] = s
                g_prob[n_ep] = lv_prob[k]
                g_reb[n_ep] = 1 if _unif(e[1]) < lv_prob[k] else 0
                favored = -s if g_reb[n_ep] == 1 else s
                n_ep += 1
                phase = _AWAY
        u = s * (price - P)
        a = path_raw[i, 0]
        b = path_raw[i, 1]
        e = ep_raw[n_ep - 1] if n_ep > 0 else ep_raw[0]
        if i == 0:
            nu = u
        elif phase == _NOISE:
            nu = _move(u, 0.5, _BIG, -_BIG, a, b, p_gap)
            left -= 1
        elif phase == _AWAY:
            nu = _move(u, p_away, -1, -_BIG, a, b, 0.0) if u > -1 else _move(u, p_away, _BIG, -_BIG, a, b, 0.0)
            if nu <= -depth:
                phase = _IDLE
                left = _randint(e[2], idle[0], idle[1])
        elif phase == _IDLE:
            nu = _move(u, 0.5, -half, -2 * depth, a, b, p_gap) if u <= -half else u - 1
            left -= 1
            if left <= 0:
                phase = _RISE
        elif phase == _RISE:
            nu = _move(u, p_drift, -1, -2 * depth - 5, a, b, 0.0)
            if nu == -1:
                phase = _HOVER
                left = _randint(e[3], hover[0], hover[1])
        elif phase == _HOVER:
            nu = _move(u, 0.5 if left > 0 else p_drift, -1, -quarter, a, b, 0.0)
            left -= 1
            if left <= 0 and nu == -1:
                phase = _PEAK
        elif phase == _PEAK:
            nu = 0
            g_peak[n_ep - 1] = i
            phase = _FALL
        elif phase == _FALL:
            nu = _move(u, p_away, -1, -3 * depth, a, b, 0.0)
            if nu <= -depth:
                phase = _WANDER
                left = _randint(e[4], wander[0], wander[1])
                wander_start = i
        elif phase == _WANDER:
            nu = _move(u, 0.5, -3, -2 * depth, a, b, p_gap)
            left -= 1
            if left <= 0:
                phase = _APPROACH
        elif phase == _APPROACH:
            nu = _move(u, p_drift, -2, -2 * depth - 5, a, b, 0.0)
            if nu == -2:
                phase = _TOUCH
        elif phase == _TOUCH:
            nu = -1
            g_touch[n_ep - 1] = i
            lo_bias = max(wander_start, i - bias_ticks)
            for j in range(lo_bias, i):
                bias[j] = favored
            phase = _REBOUND if g_reb[n_ep - 1] == 1 else _CROSS
        elif phase == _REBOUND:
            nu = _move(u, p_away, 0, -_BIG, a, b, 0.0)
            if nu <= -rebound_target:
                g_out[n_ep - 1] = i
                phase = _NOISE
                left = _randint(e[5], noise[0], noise[1])
        else:  # _CROSS
            nu = _move(u, p_drift, _BIG, -3, a, b, 0.0)
            if nu >= cross_target:
                g_out[n_ep - 1] = i
                phase = _NOISE
                left = _randint(e[5], noise[0], noise[1])
        price = P + s * nu
        prices[i] = price
    return prices, bias, n_ep, g_price, g_side, g_prob, g_reb, g_peak, g_touch, g_out


@njit(cache=True)
def _flow(prices, bias, raw, t0, prev_price, label, bid_sz, ask_sz, max_size, flow_bias, book_p, gap_ms,
          ts, kind, price, size, side, bsz, asz):
    """Events for one chunk of ticks; returns the number written and the carried state."""
    n = prices.shape[0]
    m = 0
    t = t0
    wide = max(1, np.int64(max_size * (1.0 + flow_bias)))
    for i in range(n):
        r = raw[i]
        p = prices[i]
        t += _randint(r[0], 1, 2 * gap_ms - 1) * 1_000_000
        n_tr = 1 + _randint(r[1], 0, 3)
        if prev_price >= 0:
            label = 1 if p > prev_price else -1
        # first trade of a stream keeps the initial label
        for j in range(n_tr):
            lab = label if j % 2 == 0 else -label
            hi = wide if bias[i] != 0 and lab == bias[i] else max_size
            ts[m] = t + j * 1000
            kind[m] = 0
            price[m] = p
            size[m] = _randint(r[2 + j], 1, hi)
            side[m] = 0
            bsz[m] = 0
            asz[m] = 0
            m += 1
        last = label if n_tr % 2 == 1 else -label
        bid_px = p if last < 0 else p - 1
        for k in range(4):
            if _unif(r[6 + 3 * k]) < book_p:
                is_bid = _unif(r[7 + 3 * k]) < 0.5
                delta = _randint(r[8 + 3 * k], -3, 3)
                if is_bid:
                    bid_sz = max(1, bid_sz + delta)
                else:
                    ask_sz = max(1, ask_sz + delta)
                ts[m] = t + (n_tr + k) * 1000
                kind[m] = 1
                price[m] = bid_px if is_bid else bid_px + 1
                size[m] = 0
                side[m] = 1 if is_bid else 2
                bsz[m] = bid_sz
                asz[m] = ask_sz
                m += 1
        prev_price = p
        # the tick rule's label after this tick's last trade
        label = last
    return m, t, prev_price, label, bid_sz, ask_sz


def generate(cfg: SynthConfig = SynthConfig(), chunk: int = 100_000) -> tuple[EventArray, GroundTruth]:
    """Event stream and ground-truth ledger for ``cfg``; a pure function of the config."""
    n = cfg.n_ticks
    path_raw = raw_stream(cfg.seed, 0, 2 * n).reshape(n, 2)
    max_ep = n // 200 + 16
    ep_raw = raw_stream(cfg.seed, 1, _EPISODE_DRAWS * max_ep).reshape(max_ep, _EPISODE_DRAWS)
    lv_price = np.array([lv.price for lv in cfg.levels], np.int64)
    lv_prob = np.array([lv.rebound_probability for lv in cfg.levels], np.float64)
    (prices, bias, n_ep, g_price, g_side, g_prob, g_reb, g_peak, g_touch, g_out) = _path(
        n, cfg.base_price, lv_price, lv_prob, path_raw, ep_raw, cfg.reversion, cfg.gap_probability, cfg.depth,
        cfg.rebound_target, cfg.cross_target, np.array(cfg.idle_ticks), np.array(cfg.hover_ticks),
        np.array(cfg.wander_ticks), np.array(cfg.noise_ticks), cfg.bias_ticks)
    if prices.min() <= 0:
        raise ValueError("generated prices went non-positive; raise base_price")

    flow_gen = np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    cap = 1 + _MAX_EXTRA_TRADES + _BOOK_SLOTS
    parts = []
    state = (cfg.start_ns, -1, 1, 10, 10)
    book_p = cfg.book_rate / _BOOK_SLOTS
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        raw = flow_gen.random_raw((hi - lo) * _FLOW_DRAWS).astype(np.uint64).reshape(hi - lo, _FLOW_DRAWS)
        bufs = [np.empty((hi - lo) * cap, np.int64) for _ in range(7)]
        m, *state = _flow(prices[lo:hi], bias[lo:hi], raw, *state, cfg.max_trade_size, cfg.flow_bias, book_p,
                          cfg.mean_tick_gap_ms, *bufs)
        parts.append([b[:m] for b in bufs])
    cols = [np.concatenate([p[j] for p in parts]) for j in range(7)]
    events = EventArray(ts=cols[0], kind=cols[1], price=cols[2], size=cols[3], book_side=cols[4],
                        bid_size=cols[5], ask_size=cols[6])
    k = slice(0, n_ep)
    truth = GroundTruth(g_price[k].copy(), g_side[k].copy(), g_prob[k].copy(), g_reb[k].copy(), g_peak[k].copy(),
                        g_touch[k].copy(), g_out[k].copy(), (g_out[k] >= 0).astype(np.int64))
    return events, truth


def write_ground_truth(truth: GroundTruth, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GroundTruth.COLUMNS)
        cols = [getattr(truth, c) for c in GroundTruth.COLUMNS]
        for i in range(len(truth)):
            w.writerow([repr(float(c[i])) if c.dtype.kind == "f" else int(c[i]) for c in cols])


def read_ground_truth(path) -> GroundTruth:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if tuple(header) != GroundTruth.COLUMNS:
        missing = [c for c in GroundTruth.COLUMNS if c not in header]
        raise ValueError(f"ground truth file is missing columns {missing}" if missing else "unexpected column order")
    cols = {}
    for j, name in enumerate(header):
        dtype = np.float64 if name == "rebound_probability" else np.int64
        cols[name] = np.array([float(r[j]) if dtype is np.float64 else int(r[j]) for r in body], dtype)
    return GroundTruth(**cols)
