import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_events, reference_ticks
from pricelevels.tickdata import (BookSide, EventArray, EventFormatError, EventKind, MarketEvent, TickSeries,
                                  classify_aggressor, load_events, reconstruct_ticks, tick_rule_labels,
                                  write_events)

T, B = EventKind.TRADE, EventKind.BOOK


def trade(ts, price, size=1):
    return MarketEvent(ts, T, price, size)


def book(ts, price, side, bid, ask):
    return MarketEvent(ts, B, price, 0, side, bid, ask)


@pytest.mark.parametrize("prev,change,expected", [(1, 1, 1), (1, 0, -1), (-1, -2, -1), (-1, 0, 1), (-1, 3, 1)])
def test_classify_aggressor(prev, change, expected):
    assert classify_aggressor(prev, change) == expected


def test_classify_aggressor_rejects_bad_label():
    with pytest.raises(ValueError):
        classify_aggressor(0, 1)


@given(st.lists(st.integers(1, 6), min_size=0, max_size=200))
def test_tick_rule_matches_sequential_rule(prices):
    labels = tick_rule_labels(np.array(prices))
    prev = None
    for i, p in enumerate(prices):
        expected = 1 if i == 0 else classify_aggressor(prev, p - prices[i - 1])
        assert labels[i] == expected
        prev = expected


def test_two_prices_make_two_ticks():
    s = reconstruct_ticks([trade(0, 10, 2), trade(1, 10, 3), trade(2, 10, 1), trade(3, 11, 4)])
    assert len(s) == 2
    assert s.price.tolist() == [10, 11]


def test_empty_stream():
    s = reconstruct_ticks(EventArray.empty())
    assert len(s) == 0


def test_hand_built_ledger():
    # first trade opens with +1 (ask), the repeat at the same price flips to -1 (bid),
    # the book updates after it belong to the closing tick, the uptick opens tick 2
    events = [
        trade(100, 40, 5),
        book(110, 40, BookSide.BID, 7, 9),
        trade(120, 40, 2),
        book(130, 40, BookSide.ASK, 7, 4),
        book(140, 40, BookSide.BID, 3, 4),
        trade(150, 41, 6),
    ]
    s = reconstruct_ticks(events)
    assert len(s) == 2
    t0, t1 = s[0], s[1]
    assert (t0.price, t0.t_start, t0.t_end) == (40, 100, 140)
    assert (t0.vol_ask, t0.vol_bid, t0.trades_ask, t0.trades_bid) == (5, 2, 1, 1)
    assert (t0.ob_changes_bid, t0.ob_max_bid, t0.ob_min_bid) == (2, 7, 3)
    assert (t0.ob_changes_ask, t0.ob_max_ask, t0.ob_min_ask) == (1, 4, 4)
    assert (t0.largest_trade_ask, t0.largest_trade_bid) == (5, 2)
    assert (t1.price, t1.t_start, t1.t_end, t1.vol_ask, t1.vol_bid) == (41, 150, 150, 6, 0)
    assert (t1.ob_changes_bid, t1.ob_max_bid, t1.ob_min_ask) == (0, 0, 0)


def test_leading_book_updates_fold_into_first_tick():
    s = reconstruct_ticks([book(1, 40, BookSide.BID, 5, 5), trade(2, 40, 1)])
    assert len(s) == 1
    assert s[0].t_start == 1 and s[0].ob_changes_bid == 1


@given(st.integers(0, 2**32 - 1), st.integers(0, 400))
def test_matches_reference_and_conserves_volume(seed, n):
    ev = random_events(np.random.default_rng(seed), n)
    s = reconstruct_ticks(ev)
    ref = reference_ticks(ev)
    assert len(s) == len(ref)
    for i, r in enumerate(ref):
        assert {k: getattr(s[i], k) for k in r} == r
    traded = int(ev.size[ev.kind == T].sum())
    assert int(s.vol_bid.sum() + s.vol_ask.sum()) == traded
    if len(s) > 1:
        assert np.all(np.abs(np.diff(s.price)) >= 1)
    s.validate()


def test_trades_in_a_tick_share_its_price(rng):
    ev = random_events(rng, 2000)
    s = reconstruct_ticks(ev)
    tp = ev.price[ev.kind == T]
    runs = np.flatnonzero(np.diff(tp) != 0)
    assert len(s) == len(runs) + 1
    assert s.price.tolist() == [int(tp[0])] + tp[runs + 1].tolist()


def test_deterministic(rng):
    ev = random_events(rng, 3000)
    assert reconstruct_ticks(ev) == reconstruct_ticks(ev)


def test_out_of_order_rejected_with_index():
    with pytest.raises(EventFormatError) as exc:
        reconstruct_ticks([trade(5, 10), trade(4, 10)])
    assert exc.value.index == 1


def test_unknown_kind_rejected():
    ev = EventArray(ts=[0], kind=[7], price=[10], size=[1], book_side=[0], bid_size=[0], ask_size=[0])
    with pytest.raises(EventFormatError, match="unknown event kind"):
        reconstruct_ticks(ev)


def test_no_book_updates_means_zero_ob_fields():
    s = reconstruct_ticks([trade(0, 10), trade(1, 11), trade(2, 10)])
    for name in ("ob_changes_bid", "ob_changes_ask", "ob_max_bid", "ob_max_ask", "ob_min_bid", "ob_min_ask"):
        assert not getattr(s, name).any()


@pytest.mark.parametrize("fmt,suffix", [("csv", ".csv"), ("binary", ".bin")])
def test_round_trip(tmp_path, rng, fmt, suffix):
    ev = random_events(rng, 1000)
    path = tmp_path / f"events{suffix}"
    write_events(ev, path, fmt)
    back = load_events(path, fmt)
    assert back == ev
    assert len(back) == 1000


def test_csv_non_numeric_price_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("ts,kind,price,size,bid_size,ask_size\n1,T,2800.25,1,,\n2,T,abc,1,,\n")
    with pytest.raises(EventFormatError) as exc:
        load_events(path)
    assert exc.value.line == 3


def test_csv_timestamp_regression(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("ts,kind,price,size,bid_size,ask_size\n5,T,2800.25,1,,\n2,T,2800.5,1,,\n")
    with pytest.raises(EventFormatError, match="timestamp regression"):
        load_events(path)


def test_csv_prices_convert_to_steps(tmp_path):
    path = tmp_path / "ok.csv"
    path.write_text("ts,kind,price,size,bid_size,ask_size\n1,T,2800.25,3,,\n2,B,2800.00,0,4,6\n")
    ev = load_events(path)
    assert ev.price.tolist() == [11201, 11200]
    assert ev.book_side[1] == BookSide.BID


def test_truncated_binary_names_offset(tmp_path, rng):
    ev = random_events(rng, 10)
    path = tmp_path / "events.bin"
    write_events(ev, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-15])
    with pytest.raises(EventFormatError) as exc:
        load_events(path)
    assert exc.value.offset == 8 + 9 * 40


def test_tick_series_csv_round_trip(tmp_path, rng):
    s = reconstruct_ticks(random_events(rng, 500), instrument="ES")
    s.to_csv(tmp_path / "t.csv")
    assert TickSeries.from_csv(tmp_path / "t.csv") == s
