import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pricelevels.tickdata import BookSide, EventArray, EventKind

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_events(rng: np.random.Generator, n: int, p_book: float = 0.4, start_price: int = 1000) -> EventArray:
    """Valid random stream: trades wander by -2..2 steps, book updates carry a side and sizes."""
    kind = (rng.random(n) < p_book).astype(np.int64)
    if n:
        kind[0] = EventKind.TRADE
    steps = rng.integers(-2, 3, n) * (rng.random(n) < 0.5)
    price = start_price + np.cumsum(np.where(kind == EventKind.TRADE, steps, 0))
    size = np.where(kind == EventKind.TRADE, rng.integers(1, 20, n), 0)
    side = np.where(kind == EventKind.BOOK, rng.integers(1, 3, n), 0)
    bid = np.where(kind == EventKind.BOOK, rng.integers(0, 50, n), 0)
    ask = np.where(kind == EventKind.BOOK, rng.integers(0, 50, n), 0)
    ts = np.cumsum(rng.integers(0, 1000, n))
    return EventArray(ts=ts, kind=kind, price=price, size=size, book_side=side, bid_size=bid, ask_size=ask)


def reference_ticks(events: EventArray) -> list[dict]:
    """Single-pass aggregation written directly from the tick and tick-rule definitions."""
    ticks = []
    label = None
    last_price = None
    cur = None
    pending_book = []
    for e in events:
        if e.kind == EventKind.TRADE:
            if last_price is None:
                label = 1
            elif e.price > last_price:
                label = 1
            elif e.price < last_price:
                label = -1
            else:
                label = -label
            if cur is None or e.price != cur["price"]:
                cur = {"price": e.price, "t_start": e.ts, "t_end": e.ts, "vol_bid": 0, "vol_ask": 0,
                       "trades_bid": 0, "trades_ask": 0, "bid_sizes": [], "ask_sizes": [],
                       "largest_trade_bid": 0, "largest_trade_ask": 0}
                if not ticks:
                    for b in pending_book:
                        cur["t_start"] = min(cur["t_start"], b.ts)
                        _book(cur, b)
                ticks.append(cur)
            cur["t_end"] = e.ts
            key = "ask" if label > 0 else "bid"
            cur[f"vol_{key}"] += e.size
            cur[f"trades_{key}"] += 1
            cur[f"largest_trade_{key}"] = max(cur[f"largest_trade_{key}"], e.size)
            last_price = e.price
        elif cur is None:
            pending_book.append(e)
        else:
            cur["t_end"] = e.ts
            _book(cur, e)
    out = []
    for t in ticks:
        b, a = t.pop("bid_sizes"), t.pop("ask_sizes")
        t.update(ob_changes_bid=len(b), ob_changes_ask=len(a), ob_max_bid=max(b, default=0),
                 ob_min_bid=min(b, default=0), ob_max_ask=max(a, default=0), ob_min_ask=min(a, default=0))
        out.append(t)
    return out


def _book(cur, e):
    if e.book_side == BookSide.BID:
        cur["bid_sizes"].append(e.bid_size)
    else:
        cur["ask_sizes"].append(e.ask_size)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}")
