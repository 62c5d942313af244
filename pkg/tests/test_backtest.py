import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pricelevels.backtest import (Direction, ExitReason, Signal, StrategyConfig, Trade, daily_returns, rolling_sharpe,
                                  run_backtest, session_day, to_cents, trade_statistics)
from pricelevels.tickdata import TickSeries

HOUR = 3600 * 10**9


def series(prices, step_ns=10**9, start_ns=0):
    return TickSeries.from_prices(prices, start_ns=start_ns, step_ns=step_ns)


def trade(net_cents, entry_s=0, exit_s=60, commission=420):
    return Trade(Direction.LONG, 0, 1, 0, 0, entry_s * 10**9, exit_s * 10**9, net_cents + commission, commission,
                 ExitReason.TAKE_PROFIT)


def test_take_profit_short():
    # short filled at 100 on tick 1, the target of 5 is touched on tick 4, tick 5 fills at the same price
    rep = run_backtest(series([98, 100, 99, 97, 95, 95]), [Signal(0, 1, 100)], StrategyConfig(take_profit=5))
    (t,) = rep.trades
    assert (t.direction, t.entry_index, t.exit_index, t.exit_price) == (Direction.SHORT, 1, 5, 95)
    assert t.reason is ExitReason.TAKE_PROFIT
    assert t.net == 58.30


def test_stop_loss_with_gap():
    rep = run_backtest(series([98, 100, 101, 102, 103, 104]), [Signal(0, 1, 100)], StrategyConfig(take_profit=5))
    (t,) = rep.trades
    assert t.reason is ExitReason.STOP_LOSS and t.exit_price == 104
    assert t.net == -54.20


def test_long_from_a_minimum():
    rep = run_backtest(series([52, 50, 51, 53, 55, 56]), [Signal(0, -1, 50)], StrategyConfig(take_profit=5))
    (t,) = rep.trades
    assert t.direction is Direction.LONG
    assert t.gross_cents == 6 * 1250


def test_no_signals_is_flat():
    rep = run_backtest(series([1, 2, 3]), [])
    assert rep.trades == [] and rep.total_net == 0 and rep.stats.empty


def test_end_of_data_closes_at_last_tick():
    rep = run_backtest(series([98, 100, 99, 98]), [Signal(0, 1, 100)])
    (t,) = rep.trades
    assert t.reason is ExitReason.END_OF_DATA and t.exit_index == 3 and t.gross_cents == 2 * 1250


def test_entry_cancelled_when_price_runs_away():
    rep = run_backtest(series([98, 96, 94, 90, 86, 100]), [Signal(0, 1, 100)], StrategyConfig(take_profit=15))
    assert rep.n_unfilled == 0 and len(rep.trades) == 1
    rep = run_backtest(series([98, 96, 90, 84, 82, 100]), [Signal(0, 1, 100)], StrategyConfig(take_profit=15))
    assert rep.n_unfilled == 1 and rep.trades == []


def test_entry_lifetime_expires():
    cfg = StrategyConfig(entry_lifetime=2)
    rep = run_backtest(series([98, 99, 99, 100, 90]), [Signal(0, 1, 100)], cfg)
    assert rep.n_unfilled == 1 and rep.trades == []


def test_overlapping_signal_is_skipped():
    prices = [98, 100, 101, 102, 103, 104, 100, 99]
    rep = run_backtest(series(prices), [Signal(0, 1, 100), Signal(2, 1, 100)])
    assert rep.n_skipped == 1 and len(rep.trades) == 1


def test_signals_must_be_ordered():
    with pytest.raises(ValueError, match="ordered"):
        run_backtest(series([1, 2, 3, 4]), [Signal(2, 1, 3), Signal(1, 1, 3)])


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        StrategyConfig(stop_loss=0)
    with pytest.raises(ValueError):
        StrategyConfig(commission=-1)
    with pytest.raises(ValueError):
        StrategyConfig(commission=4.205)


def random_run(seed, n=3000):
    rng = np.random.default_rng(seed)
    prices = 5000 + np.cumsum(rng.integers(-2, 3, n))
    idx = np.sort(rng.choice(n - 1, 60, replace=False))
    sig = [Signal(int(i), int(s), int(prices[i] + s * rng.integers(0, 3))) for i, s in
           zip(idx, rng.choice([1, -1], 60))]
    cfg = StrategyConfig(take_profit=int(rng.integers(5, 16)), commission=float(rng.integers(0, 1000)) / 100)
    return series(prices, step_ns=int(rng.integers(1, 600)) * 10**9), sig, cfg


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30)
def test_accounting_identity(seed):
    s, sig, cfg = random_run(seed)
    rep = run_backtest(s, sig, cfg, initial_equity=1000.0)
    gross = sum(t.gross_cents for t in rep.trades)
    assert rep.final_equity_cents - rep.initial_equity_cents == gross - len(rep.trades) * cfg.commission_cents
    assert round(sum(rep.daily_net) * 100) == gross - len(rep.trades) * cfg.commission_cents
    assert rep.n_signals == len(rep.trades) + rep.n_skipped + rep.n_unfilled


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30)
def test_one_position_at_a_time_and_next_tick_exits(seed):
    s, sig, cfg = random_run(seed)
    rep = run_backtest(s, sig, cfg)
    for a, b in zip(rep.trades, rep.trades[1:]):
        assert a.exit_index <= b.entry_index
    for t in rep.trades:
        move = int(t.direction) * (s.price[t.exit_index - 1] - t.entry_price)
        if t.reason is ExitReason.TAKE_PROFIT:
            assert move >= cfg.take_profit
        elif t.reason is ExitReason.STOP_LOSS:
            assert move <= -cfg.stop_loss
        assert t.gross_cents == int(t.direction) * (t.exit_price - t.entry_price) * cfg.tick_value_cents


def test_replay_is_deterministic():
    s, sig, cfg = random_run(4)
    a, b = run_backtest(s, sig, cfg), run_backtest(s, sig, cfg)
    assert a.trades == b.trades and a.stats == b.stats


def test_statistics_small_ledger():
    st_ = trade_statistics([trade(1000), trade(-500), trade(-500)])
    assert st_.all.rounds == 3
    assert st_.pct_profitable == pytest.approx(1 / 3)
    assert st_.max_consecutive_losers == 2 and st_.max_consecutive_winners == 1
    assert st_.max_drawdown == 10.0
    assert st_.winners.rounds == 1 and st_.losers.total_net == -10.0


def test_single_trade_longest_duration():
    st_ = trade_statistics([trade(100, 10, 4000)])
    assert st_.all.longest_trade_s == 3990 and st_.all.trades_over_1h == 1


def test_total_commission_of_6378_rounds():
    ledger = [trade(100 if i % 3 else -100) for i in range(6378)]
    assert trade_statistics(ledger).all.total_commission == 26787.6


def test_empty_statistics_flagged():
    st_ = trade_statistics([])
    assert st_.empty and st_.all.rounds == 0 and st_.pct_profitable is None


def test_session_day_split():
    base = 1559347200 * 10**9  # 2019-06-01 00:00 UTC
    keys = session_day([base + 21 * HOUR, base + 22 * HOUR, base + 45 * HOUR])
    assert keys[0] != keys[1] and keys[1] == keys[2]


def test_daily_returns_book_on_exit_day():
    base = 1559347200 * 10**9
    ts = [base, base + 23 * HOUR]
    t = Trade(Direction.LONG, 0, 1, 0, 1, ts[0], ts[1], 1250, 420, ExitReason.TAKE_PROFIT)
    days, net = daily_returns([t], ts)
    assert days == ["2019-06-01", "2019-06-02"]
    assert net.tolist() == [0.0, 8.3]


def test_sharpe_alternating_is_zero():
    r = np.tile([5.0, -5.0], 200)
    assert np.allclose(rolling_sharpe(r).values, 0.0)


def test_sharpe_constant_is_undefined():
    s = rolling_sharpe(np.full(300, 3.0))
    assert np.isnan(s.values).all() and not s.defined.any()


def test_sharpe_known_moments():
    r = np.tile([-1.0, 3.0], 126)  # mean 1, sample std 2 * sqrt(252 / 251)
    s = rolling_sharpe(r)
    assert len(s.values) == 1 and not s.partial
    assert s.values[0] == pytest.approx(0.5 * math.sqrt(252) * math.sqrt(251 / 252), rel=1e-12)
    assert rolling_sharpe(r, window=252).values[0] == pytest.approx(np.mean(r) / np.std(r, ddof=1) * math.sqrt(252))


def test_sharpe_short_history_is_partial():
    s = rolling_sharpe([1.0, 2.0, 4.0], days=["a", "b", "c"])
    assert s.partial and s.days == ["c"] and len(s.values) == 1


def test_to_cents():
    assert to_cents(4.2) == 420 and to_cents(12.5) == 1250
    with pytest.raises(ValueError):
        to_cents(0.001)
