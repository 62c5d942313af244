"""Tick-level replay of the level-reversal strategy.

For every positively classified level the strategy rests a limit order at
the level price (short below a maximum, long above a minimum) from the tick
after the signal. Once filled, a bracket of take-profit and stop-loss
distances is watched on every tick; when one is touched the position is
closed at the price of the following tick, so gaps are realized in either
direction. Money is accounted in integer cents.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import asdict, dataclass
from enum import Enum, IntEnum
from typing import NamedTuple

import numpy as np
from numba import njit

from .tickdata import TickSeries

__all__ = ["StrategyConfig", "Direction", "ExitReason", "Signal", "Trade", "TradeStats", "GroupStats",
           "SharpeSeries", "BacktestReport", "run_backtest", "trade_statistics", "rolling_sharpe",
           "daily_returns", "session_day", "to_cents"]

NS_PER_SECOND = 1_000_000_000
DAY_NS = 86_400 * NS_PER_SECOND


def to_cents(amount: float) -> int:
    """Currency amount to integer cents; rejects sub-cent precision."""
    cents = round(amount * 100)
    if abs(amount * 100 - cents) > 1e-6:
        raise ValueError(f"{amount} is not a whole number of cents")
    return int(cents)


@dataclass(frozen=True)
class StrategyConfig:
    stop_loss: int = 3
    take_profit: int = 15
    commission: float = 4.2         # per round trip
    tick_value: float = 12.50       # currency per price step per contract
    entry_lifetime: int | None = None
    """Ticks a pending entry may rest; None keeps it until price moves ``take_profit`` steps away."""
    cancel_ticks: int | None = None
    """Distance away from the level that cancels a pending entry; None means ``take_profit``."""
    session_split_hour: int = 22    # UTC hour at which a new trading day starts
    max_position: int = 1

    def __post_init__(self):
        if self.stop_loss < 1 or self.take_profit < 1:
            raise ValueError("stop_loss and take_profit must be at least 1 step")
        if self.commission < 0 or self.tick_value <= 0:
            raise ValueError("commission must be >= 0 and tick_value > 0")
        if self.entry_lifetime is not None and self.entry_lifetime < 1:
            raise ValueError("entry_lifetime must be positive")
        if self.cancel_ticks is not None and self.cancel_ticks < 1:
            raise ValueError("cancel_ticks must be positive")
        if not 0 <= self.session_split_hour < 24:
            raise ValueError("session_split_hour must be in [0, 24)")
        if self.max_position != 1:
            raise ValueError("only a maximum position of 1 contract is supported")
        to_cents(self.commission)
        to_cents(self.tick_value)

    @property
    def commission_cents(self) -> int:
        return to_cents(self.commission)

    @property
    def tick_value_cents(self) -> int:
        return to_cents(self.tick_value)

    def to_dict(self) -> dict:
        return asdict(self)


class Direction(IntEnum):
    SHORT = -1
    LONG = 1


class ExitReason(str, Enum):
    TAKE_PROFIT = "TakeProfit"
    STOP_LOSS = "StopLoss"
    END_OF_DATA = "EndOfData"


class Signal(NamedTuple):
    approach_index: int
    side: int            # +1 maximum (sell the level), -1 minimum (buy it)
    level_price: int
    level_id: int = -1


@dataclass(frozen=True)
class Trade:
    direction: Direction
    entry_index: int
    exit_index: int
    entry_price: int     # price steps
    exit_price: int
    entry_time: int      # ns
    exit_time: int
    gross_cents: int
    commission_cents: int
    reason: ExitReason
    level_id: int = -1

    @property
    def net_cents(self) -> int:
        return self.gross_cents - self.commission_cents

    @property
    def gross(self) -> float:
        return self.gross_cents / 100

    @property
    def net(self) -> float:
        return self.net_cents / 100

    @property
    def duration_ns(self) -> int:
        return self.exit_time - self.entry_time


# outcome codes of _simulate
_CANCELLED, _FILLED = 0, 1
_TP, _SL, _EOD = 0, 1, 2


@njit(cache=True)
def _simulate(prices, start, direction, limit, tp, sl, cancel, lifetime_end):
    """Replay one signal from tick ``start``.

    Returns (status, end_index, entry_index, exit_index, exit_price, reason).
    ``end_index`` is the tick after which the strategy is flat again.
    """
    n = prices.shape[0]
    k = start
    while k < n:
        if k > lifetime_end:
            return _CANCELLED, k - 1, -1, -1, 0, -1
        p = prices[k]
        if (direction > 0 and p <= limit) or (direction < 0 and p >= limit):
            break
        if direction * (p - limit) >= cancel:
            return _CANCELLED, k, -1, -1, 0, -1
        k += 1
    if k >= n:
        return _CANCELLED, n - 1, -1, -1, 0, -1
    entry = k
    while k < n:
        move = direction * (prices[k] - limit)
        reason = -1
        if move >= tp:
            reason = _TP
        elif move <= -sl:
            reason = _SL
        if reason >= 0:
            exit_k = k + 1 if k + 1 < n else k
            return _FILLED, exit_k, entry, exit_k, prices[exit_k], reason
        k += 1
    return _FILLED, n - 1, entry, n - 1, prices[n - 1], _EOD


@dataclass
class GroupStats:
    rounds: int = 0
    total_commission: float = 0.0
    max_net: float | None = None
    min_net: float | None = None
    total_net: float = 0.0
    avg_net: float | None = None
    longest_trade_s: float = 0.0
    time_in_market_s: float = 0.0
    avg_time_in_trade_s: float | None = None
    trades_over_1h: int = 0


@dataclass
class TradeStats:
    winners: GroupStats
    losers: GroupStats
    all: GroupStats
    total_gross: float
    pct_time_in_market: float | None
    pct_profitable: float | None
    daily_return_mean: float | None
    daily_return_std: float | None
    max_drawdown: float
    avg_consecutive_winners: float | None
    max_consecutive_winners: int
    avg_consecutive_losers: float | None
    max_consecutive_losers: int
    empty: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SharpeSeries:
    days: list[str]                 # window end days
    values: np.ndarray              # NaN where undefined (zero spread or too few days)
    window: int
    partial: bool                   # history shorter than the window: one value over all days

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.values)


@dataclass
class BacktestReport:
    config: StrategyConfig
    trades: list[Trade]
    equity_times: np.ndarray        # ns, one point per closed trade
    equity_cents: np.ndarray        # cumulative net after each trade
    initial_equity_cents: int
    stats: TradeStats
    daily_days: list[str]
    daily_net: np.ndarray           # currency per session day
    sharpe: SharpeSeries
    n_signals: int
    n_skipped: int                  # arrived while an order or position was live
    n_unfilled: int                 # entry cancelled or expired

    @property
    def final_equity_cents(self) -> int:
        return self.initial_equity_cents + (int(self.equity_cents[-1]) if len(self.equity_cents) else 0)

    @property
    def total_net(self) -> float:
        return (self.final_equity_cents - self.initial_equity_cents) / 100


def session_day(ts_ns, split_hour: int = 22):
    """Trading-day key (days since epoch) for timestamps; a day starts at ``split_hour`` UTC."""
    shift = ((24 - split_hour) % 24) * 3600 * NS_PER_SECOND
    return np.floor_divide(np.asarray(ts_ns, dtype=np.int64) + shift, DAY_NS)


def _day_label(key: int) -> str:
    return (dt.date(1970, 1, 1) + dt.timedelta(days=int(key))).isoformat()


def run_backtest(series: TickSeries, signals, cfg: StrategyConfig = StrategyConfig(),
                 initial_equity: float = 0.0) -> BacktestReport:
    """Replay ``signals`` (ordered by approach index) over ``series``."""
    prices = np.asarray(series.price, dtype=np.int64)
    n = len(prices)
    signals = [s if isinstance(s, Signal) else Signal(*s) for s in signals]
    for a, b in zip(signals, signals[1:]):
        if b.approach_index < a.approach_index:
            raise ValueError("signals must be ordered by approach_index")
    for s in signals:
        if not 0 <= s.approach_index < n:
            raise ValueError(f"signal at tick {s.approach_index} outside the series")
        if s.side not in (1, -1):
            raise ValueError("signal side must be +1 (maximum) or -1 (minimum)")

    cancel = cfg.cancel_ticks if cfg.cancel_ticks is not None else cfg.take_profit
    tv = cfg.tick_value_cents
    fee = cfg.commission_cents
    trades: list[Trade] = []
    busy_until = -1
    skipped = unfilled = 0
    for s in signals:
        if s.approach_index < busy_until:
            skipped += 1
            continue
        direction = -s.side  # sell a maximum, buy a minimum
        start = s.approach_index + 1
        lifetime_end = s.approach_index + cfg.entry_lifetime if cfg.entry_lifetime else n
        status, end, entry, exit_k, exit_price, reason = _simulate(
            prices, start, direction, s.level_price, cfg.take_profit, cfg.stop_loss, cancel, lifetime_end)
        busy_until = end
        if status == _CANCELLED:
            unfilled += 1
            continue
        gross = direction * (int(exit_price) - s.level_price) * tv
        trades.append(Trade(Direction(direction), int(entry), int(exit_k), int(s.level_price), int(exit_price),
                            int(series.t_start[entry]), int(series.t_start[exit_k]), int(gross), fee,
                            (ExitReason.TAKE_PROFIT, ExitReason.STOP_LOSS, ExitReason.END_OF_DATA)[reason],
                            int(s.level_id)))

    init = to_cents(initial_equity)
    nets = np.array([t.net_cents for t in trades], dtype=np.int64)
    equity = np.cumsum(nets)
    days, daily = daily_returns(trades, series.t_start, cfg.session_split_hour)
    span = int(series.t_start[-1] - series.t_start[0]) if n else 0
    stats = trade_statistics(trades, daily, span)
    return BacktestReport(cfg, trades, np.array([t.exit_time for t in trades], dtype=np.int64), equity, init,
                          stats, days, daily, rolling_sharpe(daily, days=days), len(signals), skipped, unfilled)


def daily_returns(trades: list[Trade], ts_ns, split_hour: int = 22) -> tuple[list[str], np.ndarray]:
    """Net currency per trading day, booked on the exit day, over every day the series covers."""
    ts_ns = np.asarray(ts_ns, dtype=np.int64)
    if len(ts_ns) == 0:
        return [], np.zeros(0)
    keys = np.unique(session_day(ts_ns, split_hour))
    cents = np.zeros(len(keys), dtype=np.int64)
    if trades:
        pos = np.searchsorted(keys, session_day([t.exit_time for t in trades], split_hour))
        np.add.at(cents, pos, [t.net_cents for t in trades])
    return [_day_label(k) for k in keys], cents / 100


def _runs(flags: list[bool], value: bool) -> list[int]:
    runs, cur = [], 0
    for f in flags:
        if f == value:
            cur += 1
        elif cur:
            runs.append(cur)
            cur = 0
    if cur:
        runs.append(cur)
    return runs


def _group(trades: list[Trade]) -> GroupStats:
    if not trades:
        return GroupStats()
    nets = [t.net_cents for t in trades]
    dur = [t.duration_ns / NS_PER_SECOND for t in trades]
    return GroupStats(
        rounds=len(trades),
        total_commission=sum(t.commission_cents for t in trades) / 100,
        max_net=max(nets) / 100,
        min_net=min(nets) / 100,
        total_net=sum(nets) / 100,
        avg_net=sum(nets) / 100 / len(trades),
        longest_trade_s=max(dur),
        time_in_market_s=sum(dur),
        avg_time_in_trade_s=sum(dur) / len(trades),
        trades_over_1h=sum(d > 3600 for d in dur),
    )


def trade_statistics(trades: list[Trade], daily_net=None, span_ns: int | None = None) -> TradeStats:
    """Trade statistics split into winners (net > 0), losers and all trades.

    ``daily_net`` feeds the daily-return moments and ``span_ns`` (the length
    of the replayed period) the share of time in the market.
    """
    winners = [t for t in trades if t.net_cents > 0]
    losers = [t for t in trades if t.net_cents <= 0]
    all_stats = _group(trades)
    equity = np.concatenate([[0], np.cumsum([t.net_cents for t in trades], dtype=np.int64)])
    drawdown = int(np.max(np.maximum.accumulate(equity) - equity)) if len(equity) else 0
    flags = [t.net_cents > 0 for t in trades]
    win_runs, loss_runs = _runs(flags, True), _runs(flags, False)
    daily = None if daily_net is None else np.asarray(daily_net, dtype=np.float64)
    return TradeStats(
        winners=_group(winners),
        losers=_group(losers),
        all=all_stats,
        total_gross=sum(t.gross_cents for t in trades) / 100,
        pct_time_in_market=(all_stats.time_in_market_s * NS_PER_SECOND / span_ns) if span_ns else None,
        pct_profitable=len(winners) / len(trades) if trades else None,
        daily_return_mean=float(daily.mean()) if daily is not None and len(daily) else None,
        daily_return_std=float(daily.std(ddof=1)) if daily is not None and len(daily) > 1 else None,
        max_drawdown=drawdown / 100,
        avg_consecutive_winners=float(np.mean(win_runs)) if win_runs else None,
        max_consecutive_winners=max(win_runs, default=0),
        avg_consecutive_losers=float(np.mean(loss_runs)) if loss_runs else None,
        max_consecutive_losers=max(loss_runs, default=0),
        empty=not trades,
    )


def rolling_sharpe(daily, window: int = 252, risk_free: float = 0.0, days=None,
                   periods_per_year: int = 252) -> SharpeSeries:
    """Annualized Sharpe ratio of daily returns over a trailing window.

    Values are NaN where the window's standard deviation is zero. With
    fewer days than ``window`` a single value over all days is returned and
    flagged as partial.
    """
    r = np.asarray(daily, dtype=np.float64) - risk_free
    days = list(days) if days is not None else [str(i) for i in range(len(r))]
    if window < 2:
        raise ValueError("window must be at least 2 days")

    def ratio(x):
        if len(x) < 2:
            return math.nan
        sd = x.std(ddof=1)
        return math.nan if sd == 0 else float(x.mean() / sd * math.sqrt(periods_per_year))

    if len(r) < window:
        if len(r) == 0:
            return SharpeSeries([], np.zeros(0), window, True)
        return SharpeSeries([days[-1]], np.array([ratio(r)]), window, True)
    vals = np.array([ratio(r[i - window + 1:i + 1]) for i in range(window - 1, len(r))])
    return SharpeSeries(days[window - 1:], vals, window, False)
