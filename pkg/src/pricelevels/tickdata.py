"""Raw market events, the tick rule, and price-change-delimited tick reconstruction.

Prices are integers counted in minimum price steps. Currency only appears
at the I/O boundary (CSV files) and in reports.

Event streams and tick series are columnar (one numpy array per field) so a
contract with millions of records reconstructs in vectorized passes. Single
records are available as :class:`MarketEvent` / :class:`Tick` views.

Aggressor convention: a buy-initiated trade (tick-rule label +1) lifts the
offer and is booked as *ask* volume; a sell-initiated trade (label -1) hits
the bid and is booked as *bid* volume.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, fields
from decimal import Decimal, InvalidOperation
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

__all__ = [
    "EventKind",
    "BookSide",
    "EventFormatError",
    "MarketEvent",
    "EventArray",
    "Tick",
    "TickSeries",
    "classify_aggressor",
    "tick_rule_labels",
    "reconstruct_ticks",
    "load_events",
    "write_events",
    "BINARY_MAGIC",
    "BINARY_RECORD",
]

DEFAULT_TICK_SIZE = 0.25


class EventKind(IntEnum):
    TRADE = 0
    BOOK = 1


class BookSide(IntEnum):
    NONE = 0
    BID = 1
    ASK = 2


class EventFormatError(ValueError):
    """Malformed or out-of-order event data.

    ``line`` is the 1-based CSV line, ``offset`` the byte offset of a binary
    record and ``index`` the 0-based event index, whichever applies.
    """

    def __init__(self, message: str, *, line: int | None = None,
                 offset: int | None = None, index: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        if index is not None:
            where.append(f"event {index}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.offset = offset
        self.index = index


@dataclass(frozen=True)
class MarketEvent:
    ts: int
    kind: EventKind
    price: int
    size: int = 0
    book_side: BookSide = BookSide.NONE
    bid_size: int = 0
    ask_size: int = 0


_EVENT_DTYPES = {
    "ts": np.int64,
    "kind": np.uint8,
    "price": np.int64,
    "size": np.int64,
    "book_side": np.uint8,
    "bid_size": np.int64,
    "ask_size": np.int64,
}


@dataclass
class EventArray:
    """Columnar market-event stream."""

    ts: np.ndarray
    kind: np.ndarray
    price: np.ndarray
    size: np.ndarray
    book_side: np.ndarray
    bid_size: np.ndarray
    ask_size: np.ndarray

    def __post_init__(self):
        for name, dtype in _EVENT_DTYPES.items():
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=dtype))
        n = len(self.ts)
        if any(len(getattr(self, name)) != n for name in _EVENT_DTYPES):
            raise ValueError("event columns have different lengths")

    @classmethod
    def empty(cls) -> "EventArray":
        return cls(**{name: np.zeros(0, dtype) for name, dtype in _EVENT_DTYPES.items()})

    @classmethod
    def from_events(cls, events: Iterable[MarketEvent]) -> "EventArray":
        rows = [(e.ts, int(e.kind), e.price, e.size, int(e.book_side), e.bid_size, e.ask_size)
                for e in events]
        if not rows:
            return cls.empty()
        cols = list(zip(*rows))
        return cls(*(np.array(c, dtype=d) for c, d in zip(cols, _EVENT_DTYPES.values())))

    def __len__(self) -> int:
        return len(self.ts)

    def __getitem__(self, i: int) -> MarketEvent:
        return MarketEvent(
            ts=int(self.ts[i]),
            kind=EventKind(int(self.kind[i])),
            price=int(self.price[i]),
            size=int(self.size[i]),
            book_side=BookSide(int(self.book_side[i])),
            bid_size=int(self.bid_size[i]),
            ask_size=int(self.ask_size[i]),
        )

    def __iter__(self) -> Iterator[MarketEvent]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventArray):
            return NotImplemented
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in _EVENT_DTYPES)

    def validate(self) -> None:
        """Raise :class:`EventFormatError` naming the first offending event."""
        n = len(self)
        if n == 0:
            return
        bad = np.flatnonzero(np.diff(self.ts) < 0)
        if bad.size:
            raise EventFormatError("timestamp regression", index=int(bad[0]) + 1)
        bad = np.flatnonzero(self.kind > EventKind.BOOK)
        if bad.size:
            raise EventFormatError(f"unknown event kind {int(self.kind[bad[0]])}", index=int(bad[0]))
        bad = np.flatnonzero(self.price <= 0)
        if bad.size:
            raise EventFormatError("non-positive price", index=int(bad[0]))
        neg = (self.size < 0) | (self.bid_size < 0) | (self.ask_size < 0)
        bad = np.flatnonzero(neg)
        if bad.size:
            raise EventFormatError("negative size", index=int(bad[0]))
        trade = self.kind == EventKind.TRADE
        bad = np.flatnonzero(trade & (self.size < 1))
        if bad.size:
            raise EventFormatError("trade with size < 1", index=int(bad[0]))
        book = self.kind == EventKind.BOOK
        bad = np.flatnonzero(book & ((self.book_side < BookSide.BID) | (self.book_side > BookSide.ASK)))
        if bad.size:
            raise EventFormatError("book update without a side", index=int(bad[0]))


@dataclass(frozen=True)
class Tick:
    price: int
    t_start: int
    t_end: int
    vol_bid: int
    vol_ask: int
    trades_bid: int
    trades_ask: int
    ob_changes_bid: int
    ob_changes_ask: int
    ob_max_bid: int
    ob_max_ask: int
    ob_min_bid: int
    ob_min_ask: int
    largest_trade_bid: int
    largest_trade_ask: int


TICK_FIELDS = tuple(f.name for f in fields(Tick))


class TickSeries:
    """Ordered ticks of one instrument, stored column-wise as int64 arrays."""

    def __init__(self, instrument: str = "", tick_size: float = DEFAULT_TICK_SIZE, **columns):
        self.instrument = instrument
        self.tick_size = float(tick_size)
        n = None
        for name in TICK_FIELDS:
            if name not in columns:
                if name != "price" and n is not None:
                    columns[name] = np.zeros(n, np.int64)
                else:
                    raise TypeError(f"missing tick column {name!r}")
            arr = np.ascontiguousarray(columns.pop(name), dtype=np.int64)
            if n is None:
                n = len(arr)
            elif len(arr) != n:
                raise ValueError(f"tick column {name!r} has length {len(arr)}, expected {n}")
            setattr(self, name, arr)
        if columns:
            raise TypeError(f"unknown tick columns: {sorted(columns)}")

    @classmethod
    def from_prices(cls, prices, instrument: str = "", tick_size: float = DEFAULT_TICK_SIZE,
                    start_ns: int = 0, step_ns: int = 1_000_000_000, **columns) -> "TickSeries":
        """Series with the given prices and evenly spaced timestamps; other columns default to 0."""
        prices = np.asarray(prices, dtype=np.int64)
        t = start_ns + step_ns * np.arange(len(prices), dtype=np.int64)
        columns.setdefault("t_start", t)
        columns.setdefault("t_end", t)
        return cls(instrument, tick_size, price=prices, **columns)

    def __len__(self) -> int:
        return len(self.price)

    def __getitem__(self, i: int) -> Tick:
        return Tick(*(int(getattr(self, name)[i]) for name in TICK_FIELDS))

    def __iter__(self) -> Iterator[Tick]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TickSeries):
            return NotImplemented
        return (self.instrument == other.instrument and self.tick_size == other.tick_size
                and all(np.array_equal(getattr(self, n), getattr(other, n)) for n in TICK_FIELDS))

    def columns(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TICK_FIELDS}

    def validate(self) -> None:
        if len(self) == 0:
            return
        if np.any(self.t_start > self.t_end):
            raise ValueError("tick with t_start > t_end")
        if np.any(np.diff(self.t_start) < 0):
            raise ValueError("ticks not ordered by t_start")
        if np.any(np.abs(np.diff(self.price)) < 1):
            raise ValueError("adjacent ticks share a price")
        if np.any(self.vol_bid < self.largest_trade_bid) or np.any(self.vol_ask < self.largest_trade_ask):
            raise ValueError("largest trade exceeds tick volume")
        if np.any(self.ob_min_bid > self.ob_max_bid) or np.any(self.ob_min_ask > self.ob_max_ask):
            raise ValueError("ob_min exceeds ob_max")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# instrument={self.instrument} tick_size={self.tick_size!r}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TICK_FIELDS)
            w.writerows(np.column_stack([getattr(self, n) for n in TICK_FIELDS]).tolist())

    @classmethod
    def from_csv(cls, path) -> "TickSeries":
        with open(path, newline="") as fh:
            meta = fh.readline()
            if not meta.startswith("#"):
                raise ValueError(f"{path}: missing tick-series metadata line")
            kv = dict(item.split("=", 1) for item in meta[1:].split())
            header = next(csv.reader([fh.readline()]))
            if tuple(header) != TICK_FIELDS:
                missing = [c for c in TICK_FIELDS if c not in header]
                raise ValueError(f"{path}: bad tick header, missing {missing}")
            body = fh.read()
        if body.strip():
            data = np.array([row.split(",") for row in body.split()], dtype=np.int64)
        else:
            data = np.zeros((0, len(TICK_FIELDS)), np.int64)
        cols = {name: data[:, j] for j, name in enumerate(TICK_FIELDS)}
        return cls(kv.get("instrument", ""), float(kv.get("tick_size", DEFAULT_TICK_SIZE)), **cols)


def classify_aggressor(prev_label: int, price_change: int) -> int:
    """Tick rule: +1 on an uptick, -1 on a downtick, the previous label negated otherwise."""
    if prev_label not in (1, -1):
        raise ValueError(f"prev_label must be +1 or -1, got {prev_label!r}")
    if price_change > 0:
        return 1
    if price_change < 0:
        return -1
    return -prev_label


def tick_rule_labels(trade_prices: np.ndarray, initial_label: int = 1) -> np.ndarray:
    """Aggressor label of every trade in a sequence of trade prices.

    The first trade has no reference price and takes ``initial_label``.
    Between nonzero price changes labels alternate, so each label is the sign
    of the last nonzero change flipped once per zero-change trade since.
    """
    p = np.asarray(trade_prices, dtype=np.int64)
    n = len(p)
    if n == 0:
        return np.zeros(0, np.int8)
    sgn = np.empty(n, np.int8)
    sgn[0] = initial_label
    sgn[1:] = np.sign(np.diff(p))
    pos = np.arange(n)
    anchor = np.maximum.accumulate(np.where(sgn != 0, pos, 0))
    flips = (pos - anchor) & 1
    return (sgn[anchor] * np.where(flips == 1, -1, 1)).astype(np.int8)


def reconstruct_ticks(events: EventArray | Iterable[MarketEvent], tick_size: float = DEFAULT_TICK_SIZE,
                      instrument: str = "") -> TickSeries:
    """Aggregate an event stream into ticks delimited by traded-price changes.

    A tick opens on a trade whose price differs from the previous trade and
    collects every following event up to the next such trade, so book updates
    between the last trade at one price and the first trade at the next belong
    to the closing tick. Book updates preceding the first trade are folded
    into the first tick.
    """
    if not isinstance(events, EventArray):
        events = EventArray.from_events(events)
    events.validate()

    trade_idx = np.flatnonzero(events.kind == EventKind.TRADE)
    if trade_idx.size == 0:
        return TickSeries(instrument, tick_size, **{n: np.zeros(0, np.int64) for n in TICK_FIELDS})

    tp = events.price[trade_idx]
    labels = tick_rule_labels(tp)
    opens = np.zeros(len(tp), bool)
    opens[1:] = tp[1:] != tp[:-1]
    trade_tick = np.cumsum(opens)
    n_ticks = int(trade_tick[-1]) + 1

    last_trade = np.searchsorted(trade_idx, np.arange(len(events)), side="right") - 1
    ev_tick = trade_tick[np.clip(last_trade, 0, None)]
    starts = np.searchsorted(ev_tick, np.arange(n_ticks), side="left")
    ends = np.append(starts[1:], len(events)) - 1

    size = events.size[trade_idx]
    buy = labels > 0
    sell = ~buy

    def _sum(mask, weights=None):
        return np.bincount(trade_tick[mask], weights=None if weights is None else weights[mask],
                           minlength=n_ticks).astype(np.int64)

    def _max(keys, vals):
        out = np.zeros(n_ticks, np.int64)
        np.maximum.at(out, keys, vals)
        return out

    book = events.kind == EventKind.BOOK
    bid_upd = book & (events.book_side == BookSide.BID)
    ask_upd = book & (events.book_side == BookSide.ASK)

    def _book(mask, sizes):
        keys = ev_tick[mask]
        vals = sizes[mask]
        count = np.bincount(keys, minlength=n_ticks).astype(np.int64)
        hi = _max(keys, vals)
        lo = np.full(n_ticks, np.iinfo(np.int64).max)
        np.minimum.at(lo, keys, vals)
        lo[count == 0] = 0
        return count, hi, lo

    chg_bid, max_bid, min_bid = _book(bid_upd, events.bid_size)
    chg_ask, max_ask, min_ask = _book(ask_upd, events.ask_size)

    return TickSeries(
        instrument,
        tick_size,
        price=tp[np.searchsorted(trade_tick, np.arange(n_ticks))],
        t_start=events.ts[starts],
        t_end=events.ts[ends],
        vol_bid=_sum(sell, size),
        vol_ask=_sum(buy, size),
        trades_bid=_sum(sell),
        trades_ask=_sum(buy),
        ob_changes_bid=chg_bid,
        ob_changes_ask=chg_ask,
        ob_max_bid=max_bid,
        ob_max_ask=max_ask,
        ob_min_bid=min_bid,
        ob_min_ask=min_ask,
        largest_trade_bid=_max(trade_tick[sell], size[sell]),
        largest_trade_ask=_max(trade_tick[buy], size[buy]),
    )


# ---------------------------------------------------------------- file formats

CSV_HEADER = ("ts", "kind", "price", "size", "bid_size", "ask_size")
_SIDE_CODES = {"": BookSide.NONE, "B": BookSide.BID, "A": BookSide.ASK}
_SIDE_LETTERS = {v: k for k, v in _SIDE_CODES.items()}

BINARY_MAGIC = b"XLB1"
# ts, price, size, bid_size, ask_size, kind, side, 10 reserved bytes
BINARY_RECORD = np.dtype([
    ("ts", "<i8"), ("price", "<i8"), ("size", "<u4"), ("bid_size", "<u4"),
    ("ask_size", "<u4"), ("kind", "u1"), ("side", "u1"), ("reserved", "V10"),
])
assert BINARY_RECORD.itemsize == 40
_BINARY_HEADER = struct.Struct("<4sI")


def _to_steps(text: str, step: Decimal, line: int) -> int:
    try:
        value = Decimal(text)
    except InvalidOperation:
        raise EventFormatError(f"non-numeric price {text!r}", line=line) from None
    q = value / step
    if q != q.to_integral_value():
        raise EventFormatError(f"price {text} is not a multiple of the tick size {step}", line=line)
    return int(q)


def _read_csv(path: Path, tick_size: float) -> EventArray:
    step = Decimal(str(tick_size))
    cols = {name: [] for name in _EVENT_DTYPES}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:6]) != CSV_HEADER:
            raise EventFormatError(f"expected header {','.join(CSV_HEADER)}", line=1)
        has_side = len(header) > 6 and header[6] == "side"
        prev_bid = prev_ask = None
        last_ts = None
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 6:
                raise EventFormatError(f"expected at least 6 fields, got {len(row)}", line=line)
            try:
                ts = int(row[0])
                size = int(row[3] or 0)
                bid = int(row[4] or 0)
                ask = int(row[5] or 0)
            except ValueError as exc:
                raise EventFormatError(f"non-integer field: {exc}", line=line) from None
            if row[1] == "T":
                kind, side = EventKind.TRADE, BookSide.NONE
            elif row[1] == "B":
                kind = EventKind.BOOK
                code = row[6] if has_side and len(row) > 6 else ""
                if code:
                    if code not in ("B", "A"):
                        raise EventFormatError(f"unknown book side {code!r}", line=line)
                    side = _SIDE_CODES[code]
                else:
                    # L1 snapshot without an explicit side: the side whose size moved
                    side = BookSide.ASK if prev_bid is not None and bid == prev_bid and ask != prev_ask \
                        else BookSide.BID
                prev_bid, prev_ask = bid, ask
            else:
                raise EventFormatError(f"unknown event kind {row[1]!r}", line=line)
            if last_ts is not None and ts < last_ts:
                raise EventFormatError("timestamp regression", line=line)
            last_ts = ts
            price = _to_steps(row[2], step, line)
            if price <= 0 or size < 0 or bid < 0 or ask < 0:
                raise EventFormatError("negative size or non-positive price", line=line)
            if kind == EventKind.TRADE and size < 1:
                raise EventFormatError("trade with size < 1", line=line)
            cols["ts"].append(ts)
            cols["kind"].append(int(kind))
            cols["price"].append(price)
            cols["size"].append(size)
            cols["book_side"].append(int(side))
            cols["bid_size"].append(bid)
            cols["ask_size"].append(ask)
    return EventArray(**{k: np.array(v, dtype=_EVENT_DTYPES[k]) for k, v in cols.items()})


def _write_csv(events: EventArray, path: Path, tick_size: float) -> None:
    step = Decimal(str(tick_size))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER + ("side",))
        for ts, kind, price, size, side, bid, ask in zip(
                events.ts.tolist(), events.kind.tolist(), events.price.tolist(), events.size.tolist(),
                events.book_side.tolist(), events.bid_size.tolist(), events.ask_size.tolist()):
            if kind == EventKind.TRADE:
                w.writerow((ts, "T", price * step, size, "", "", ""))
            else:
                w.writerow((ts, "B", price * step, size, bid, ask, _SIDE_LETTERS[BookSide(side)]))


def _read_binary(path: Path) -> EventArray:
    raw = Path(path).read_bytes()
    if len(raw) < _BINARY_HEADER.size:
        raise EventFormatError("file shorter than the header", offset=0)
    magic, rec_size = _BINARY_HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise EventFormatError(f"bad magic {magic!r}", offset=0)
    if rec_size != BINARY_RECORD.itemsize:
        raise EventFormatError(f"unsupported record size {rec_size}", offset=4)
    body = len(raw) - _BINARY_HEADER.size
    n, rem = divmod(body, BINARY_RECORD.itemsize)
    if rem:
        offset = _BINARY_HEADER.size + n * BINARY_RECORD.itemsize
        raise EventFormatError(f"truncated record ({rem} of {BINARY_RECORD.itemsize} bytes)", offset=offset)
    rec = np.frombuffer(raw, dtype=BINARY_RECORD, count=n, offset=_BINARY_HEADER.size)
    events = EventArray(ts=rec["ts"], kind=rec["kind"], price=rec["price"], size=rec["size"],
                        book_side=rec["side"], bid_size=rec["bid_size"], ask_size=rec["ask_size"])
    try:
        events.validate()
    except EventFormatError as exc:
        raise EventFormatError(str(exc).split(" (")[0],
                               offset=_BINARY_HEADER.size + exc.index * BINARY_RECORD.itemsize,
                               index=exc.index) from None
    return events


def _write_binary(events: EventArray, path: Path) -> None:
    rec = np.zeros(len(events), dtype=BINARY_RECORD)
    rec["ts"] = events.ts
    rec["price"] = events.price
    rec["size"] = events.size
    rec["bid_size"] = events.bid_size
    rec["ask_size"] = events.ask_size
    rec["kind"] = events.kind
    rec["side"] = events.book_side
    with open(path, "wb") as fh:
        fh.write(_BINARY_HEADER.pack(BINARY_MAGIC, BINARY_RECORD.itemsize))
        fh.write(rec.tobytes())


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt:
        fmt = fmt.lower()
    elif path.suffix.lower() in (".bin", ".xlb"):
        fmt = "binary"
    else:
        fmt = "csv"
    if fmt not in ("csv", "binary"):
        raise ValueError(f"unknown event format {fmt!r}")
    return fmt


def load_events(path, format: str | None = None, tick_size: float = DEFAULT_TICK_SIZE) -> EventArray:
    """Read an event file; ``format`` is ``"csv"`` or ``"binary"`` (default: by suffix)."""
    path = Path(path)
    if _infer_format(path, format) == "csv":
        return _read_csv(path, tick_size)
    return _read_binary(path)


def write_events(events: EventArray, path, format: str | None = None,
                 tick_size: float = DEFAULT_TICK_SIZE) -> None:
    path = Path(path)
    if _infer_format(path, format) == "csv":
        _write_csv(events, path, tick_size)
    else:
        _write_binary(events, path)
