"""MBO text ingestion, the ``.lobb`` container, and synthetic corpora."""
from __future__ import annotations

import bz2
import csv
import gzip
import heapq
import io
import lzma
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .codec import (ADD, CANCEL, EVENT_DTYPE, EVENT_SIZE, FILL, MODIFY, EventFlags,
                    EventStream, PackedEvent, array_to_events, events_to_array, pack_ev)

# container -------------------------------------------------------------------

MAGIC = b"LOBBYTE1"
VERSION = 1
_HEADER = struct.Struct("<8sHHQ")
HEADER_SIZE = _HEADER.size

_OPENERS = {".gz": gzip.open, ".bz2": bz2.open, ".xz": lzma.open}


class IoFailure(OSError):
    pass


class BadMagic(ValueError):
    pass


class VersionUnsupported(ValueError):
    pass


class TruncatedPayload(ValueError):
    pass


class MalformedRow(ValueError):
    def __init__(self, row_index, reason):
        super().__init__(f"row {row_index}: {reason}")
        self.row_index = row_index
        self.reason = reason


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class PackedFileHeader:
    magic: bytes
    version: int
    event_count: int
    flags: int = 0

    def to_bytes(self) -> bytes:
        return _HEADER.pack(self.magic, self.version, self.flags, self.event_count)

    @classmethod
    def from_bytes(cls, b: bytes) -> "PackedFileHeader":
        if len(b) < HEADER_SIZE:
            raise TruncatedPayload(f"header needs {HEADER_SIZE} bytes, got {len(b)}")
        magic, version, flags, count = _HEADER.unpack(b[:HEADER_SIZE])
        if magic != MAGIC:
            raise BadMagic(f"bad magic {magic!r}")
        if version != VERSION:
            raise VersionUnsupported(f"container version {version} not supported")
        return cls(magic, version, count, flags)


def _open(path, mode):
    path = Path(path)
    opener = _OPENERS.get(path.suffix, open)
    try:
        return opener(path, mode)
    except OSError as e:
        raise IoFailure(f"cannot open {path}: {e}") from e


def _as_array(events) -> np.ndarray:
    if isinstance(events, EventStream):
        return events.events
    if isinstance(events, np.ndarray):
        return np.ascontiguousarray(events, dtype=EVENT_DTYPE)
    return events_to_array(list(events))


def write_packed_file(path, events) -> PackedFileHeader:
    """Write header + payload. Accepts an EventStream, structured array or PackedEvents."""
    arr = _as_array(events)
    header = PackedFileHeader(MAGIC, VERSION, len(arr))
    try:
        with _open(path, "wb") as f:
            f.write(header.to_bytes())
            f.write(arr.tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    return header


def _check_payload(path, header):
    path = Path(path)
    if path.suffix in _OPENERS:
        return
    payload = path.stat().st_size - HEADER_SIZE
    if payload % EVENT_SIZE or payload != header.event_count * EVENT_SIZE:
        raise TruncatedPayload(f"{path}: payload of {payload} bytes does not hold "
                               f"{header.event_count} events of {EVENT_SIZE} bytes")


def read_header(path) -> PackedFileHeader:
    with _open(path, "rb") as f:
        return PackedFileHeader.from_bytes(f.read(HEADER_SIZE))


def read_packed_file(path, chunk_events: int = 65536) -> tuple[PackedFileHeader, Iterator[PackedEvent]]:
    """Validate the header and stream events lazily in fixed-size chunks."""
    header = read_header(path)
    _check_payload(path, header)

    def it():
        remaining = header.event_count
        with _open(path, "rb") as f:
            f.read(HEADER_SIZE)
            while remaining:
                n = min(chunk_events, remaining)
                buf = f.read(n * EVENT_SIZE)
                if len(buf) != n * EVENT_SIZE:
                    raise TruncatedPayload(f"{path}: payload ends early")
                remaining -= n
                yield from array_to_events(np.frombuffer(buf, dtype=EVENT_DTYPE))
            if f.read(1):
                raise TruncatedPayload(f"{path}: trailing bytes after payload")

    return header, it()


def load_stream(path) -> EventStream:
    """Whole-file load as a structured array (memory-mapped when uncompressed)."""
    header = read_header(path)
    _check_payload(path, header)
    path = Path(path)
    if path.suffix in _OPENERS:
        with _open(path, "rb") as f:
            f.read(HEADER_SIZE)
            buf = f.read()
        if len(buf) != header.event_count * EVENT_SIZE:
            raise TruncatedPayload(f"{path}: payload length mismatch")
        arr = np.frombuffer(buf, dtype=EVENT_DTYPE)
    else:
        arr = np.memmap(path, dtype=EVENT_DTYPE, mode="r", offset=HEADER_SIZE,
                        shape=(header.event_count,))
    return EventStream(arr, {"source": str(path)})


# MBO text ingestion ---------------------------------------------------------

MBO_FIELDS = ("ts_event", "action", "side", "price", "size", "order_id")
MAX_ORDER_ID = 0xFFFFFFFF

ACTION_MAP = {"A": ADD, "C": CANCEL, "M": MODIFY, "F": FILL, "T": FILL}


@dataclass(frozen=True)
class MboRecord:
    ts_event: int
    action: str
    side: str
    price: float
    size: float
    order_id: int


@dataclass
class ConversionStats:
    total_rows: int = 0
    emitted: int = 0
    dropped_zero_price: int = 0
    dropped_zero_qty: int = 0
    dropped_unknown_action: int = 0
    dropped_oversize_order_id: int = 0

    @property
    def dropped(self) -> int:
        return (self.dropped_zero_price + self.dropped_zero_qty
                + self.dropped_unknown_action + self.dropped_oversize_order_id)

    def balanced(self) -> bool:
        return self.total_rows == self.emitted + self.dropped

    def as_dict(self):
        return asdict(self)


def default_schema(header_row: list[str] | None = None) -> dict[str, int]:
    """Column index for each of the six MBO fields; extra columns are ignored."""
    if header_row is None:
        return {name: i for i, name in enumerate(MBO_FIELDS)}
    cols = [c.strip() for c in header_row]
    missing = [f for f in MBO_FIELDS if f not in cols]
    if missing:
        raise MalformedRow(0, f"header lacks columns {missing}")
    return {f: cols.index(f) for f in MBO_FIELDS}


def parse_mbo_row(row, schema: dict[str, int] | None = None, row_index: int = 0,
                  delimiter: str = ",") -> MboRecord:
    if isinstance(row, str):
        row = next(csv.reader([row], delimiter=delimiter))
    schema = schema or default_schema()
    try:
        vals = {f: row[i].strip() for f, i in schema.items()}
    except IndexError:
        raise MalformedRow(row_index, f"expected {max(schema.values()) + 1} columns, got {len(row)}")
    for f, v in vals.items():
        if v == "":
            raise MalformedRow(row_index, f"empty {f}")
    try:
        ts = int(vals["ts_event"])
        price = float(vals["price"])
        size = float(vals["size"])
        oid = int(vals["order_id"])
    except ValueError as e:
        raise MalformedRow(row_index, str(e)) from e
    if oid < 0:
        raise MalformedRow(row_index, f"negative order_id {oid}")
    return MboRecord(ts, vals["action"][:1], vals["side"][:1], price, size, oid)


def iter_mbo_file(path, delimiter: str = ",", max_bad_rows: int = 0, bad_rows: list | None = None):
    """Yield MboRecords from a delimited text file with a header row.

    Malformed rows are collected in ``bad_rows``; more than ``max_bad_rows``
    of them re-raises the offending MalformedRow.
    """
    bad = bad_rows if bad_rows is not None else []
    try:
        f = open(path, newline="")
    except OSError as e:
        raise IoFailure(f"cannot open {path}: {e}") from e
    with f:
        reader = csv.reader(f, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            return
        schema = default_schema(header)
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            try:
                yield parse_mbo_row(row, schema, i)
            except MalformedRow as e:
                bad.append(e)
                if len(bad) > max_bad_rows:
                    raise


def _side_flags(side: str) -> EventFlags:
    return EventFlags(exch=True, buy=side == "B", sell=side == "A")


def convert_stream(records: Iterable[MboRecord]) -> tuple[Iterator[PackedEvent], ConversionStats]:
    """Lazily map MBO records to packed events; drops are counted in the returned stats.

    The stats object is filled in as the iterator is consumed.
    """
    stats = ConversionStats()

    def it():
        for r in records:
            stats.total_rows += 1
            et = ACTION_MAP.get(r.action)
            if et is None:
                stats.dropped_unknown_action += 1
                continue
            if r.order_id > MAX_ORDER_ID:
                stats.dropped_oversize_order_id += 1
                continue
            if not r.price > 0:
                stats.dropped_zero_price += 1
                continue
            if not r.size > 0:
                stats.dropped_zero_qty += 1
                continue
            stats.emitted += 1
            yield PackedEvent(pack_ev(r.order_id, et, _side_flags(r.side)), r.ts_event,
                              float(r.price), float(r.size))

    return it(), stats


# synthetic corpora ----------------------------------------------------------

TABLE1_FRACTIONS = dict(add_fraction=0.315, cancel_fraction=0.313, modify_fraction=0.368,
                        fill_fraction=0.002, other_fraction=0.002)


@dataclass
class SyntheticConfig:
    seed: int = 0
    duration: float = 600.0
    n_events: int | None = None
    base_rate: float = 80.0
    burstiness: float = 0.7
    decay: float = 50.0
    mid_price0: float = 87500.0
    tick_size: float = 5.0
    # defaults keep the expected number of resting orders roughly constant
    add_fraction: float = 0.36
    cancel_fraction: float = 0.34
    modify_fraction: float = 0.26
    fill_fraction: float = 0.04
    other_fraction: float = 0.0
    other_code: int = 0
    size_distribution: float = 1.5
    price_vol_ticks: float = 0.5
    # per-event pull of the latent mid toward mid_price0 (0 = pure random walk)
    mean_reversion: float = 3e-4
    min_book_orders: int = 20
    start_ts: int = 1_731_312_000_000_000_000

    def validate(self):
        fr = [self.add_fraction, self.cancel_fraction, self.modify_fraction,
              self.fill_fraction, self.other_fraction]
        if any(not 0 <= f <= 1 for f in fr):
            raise InvalidConfig("event fractions must lie in [0, 1]")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise InvalidConfig(f"event fractions sum to {sum(fr)}, not 1")
        if not self.base_rate > 0:
            raise InvalidConfig("base_rate must be positive")
        if not self.decay > 0:
            raise InvalidConfig("decay must be positive")
        if not 0 <= self.burstiness < 1:
            raise InvalidConfig("burstiness must lie in [0, 1)")
        if not self.tick_size > 0 or not self.mid_price0 > 0:
            raise InvalidConfig("tick_size and mid_price0 must be positive")
        if not 0 <= self.mean_reversion < 1:
            raise InvalidConfig("mean_reversion must lie in [0, 1)")
        if not self.size_distribution > 0:
            raise InvalidConfig("size tail exponent must be positive")
        if self.n_events is None and not self.duration > 0:
            raise InvalidConfig("duration must be positive")
        if self.n_events is not None and self.n_events < 0:
            raise InvalidConfig("n_events must be non-negative")
        if self.other_fraction > 0 and self.other_code in (10, 11, 12, 13):
            raise InvalidConfig("other_code collides with a known event type")

    @classmethod
    def table1(cls, **kw) -> "SyntheticConfig":
        d = dict(TABLE1_FRACTIONS)
        d.update(kw)
        return cls(**d)


def hawkes_arrivals(base_rate, burstiness, decay, rng, n=None, horizon=None):
    """Arrival times of an exponential-kernel Hawkes process and the intensity at each.

    Intensity jumps by ``burstiness * decay`` at every event and relaxes back to
    ``base_rate`` at rate ``decay``. Uses exact (rejection-free) sampling of the
    next inter-arrival time as the minimum of a Poisson and a decaying component.
    """
    jump = burstiness * decay
    times, lams = [], []
    t = 0.0
    excess = 0.0  # lambda(t+) - base_rate
    block = 4096
    while True:
        u1 = rng.random(block)
        u2 = rng.random(block)
        for a, b in zip(u1, u2):
            s_pois = -math.log1p(-a) / base_rate
            s_exc = math.inf
            if excess > 0:
                dd = 1.0 + decay * math.log1p(-b) / excess
                if dd > 0:
                    s_exc = -math.log(dd) / decay
            w = min(s_pois, s_exc)
            if horizon is not None and t + w > horizon:
                return np.array(times), np.array(lams)
            t += w
            excess *= math.exp(-decay * w)
            lams.append(base_rate + excess)
            times.append(t)
            excess += jump
            if n is not None and len(times) >= n:
                return np.array(times), np.array(lams)


class _Book:
    """Live-order bookkeeping for the synthetic generator."""

    def __init__(self):
        self.orders: dict[int, list] = {}  # oid -> [side, price_ticks, qty]
        self.ids: list[int] = []
        self.pos: dict[int, int] = {}
        self.bids: list = []  # (-price, oid)
        self.asks: list = []  # (price, oid)

    def __len__(self):
        return len(self.ids)

    def add(self, oid, side, price, qty):
        self.orders[oid] = [side, price, qty]
        self.pos[oid] = len(self.ids)
        self.ids.append(oid)
        self._push(oid, side, price)

    def _push(self, oid, side, price):
        if side > 0:
            heapq.heappush(self.bids, (-price, oid))
        else:
            heapq.heappush(self.asks, (price, oid))

    def remove(self, oid):
        i = self.pos.pop(oid)
        last = self.ids.pop()
        if last != oid:
            self.ids[i] = last
            self.pos[last] = i
        del self.orders[oid]

    def reprice(self, oid, price):
        o = self.orders[oid]
        o[1] = price
        self._push(oid, o[0], price)

    def _top(self, heap, side):
        # lazy deletion: drop entries whose order is gone or was repriced
        while heap:
            key, oid = heap[0]
            o = self.orders.get(oid)
            if o is not None and o[0] == side and o[1] == -key * side:
                return oid
            heapq.heappop(heap)
        return None

    def best_bid(self):
        return self._top(self.bids, 1)

    def best_ask(self):
        return self._top(self.asks, -1)

    def price(self, oid):
        return self.orders[oid][1]


def synth_generate(cfg: SyntheticConfig) -> EventStream:
    """Deterministic synthetic event stream with bursty arrivals and a coherent book.

    A latent mid-price (in ticks) random-walks with a per-event step whose scale
    grows with the instantaneous arrival intensity, which ties volatility to
    activity. Orders rest on a book that never crosses; cancels preferentially
    remove orders left on the wrong side of the latent mid.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    times, lams = hawkes_arrivals(cfg.base_rate, cfg.burstiness, cfg.decay, rng,
                                  n=cfg.n_events,
                                  horizon=None if cfg.n_events is not None else cfg.duration)
    n = len(times)
    ts = cfg.start_ts + np.round(times * 1e9).astype(np.int64)

    kinds = np.array([ADD.code, CANCEL.code, MODIFY.code, FILL.code, cfg.other_code])
    probs = np.array([cfg.add_fraction, cfg.cancel_fraction, cfg.modify_fraction,
                      cfg.fill_fraction, cfg.other_fraction])
    draws = rng.choice(len(kinds), size=n, p=probs)
    unif = rng.random((n, 4))
    steps = rng.standard_normal(n) * cfg.price_vol_ticks * np.sqrt(lams / cfg.base_rate) if n else np.zeros(0)
    sizes = np.floor(rng.random(2 * n + 1) ** (-1.0 / cfg.size_distribution))
    offsets = rng.geometric(0.5, size=n) - 1

    out = np.zeros(n, dtype=EVENT_DTYPE)
    book = _Book()
    mid0 = cfg.mid_price0 / cfg.tick_size
    mid = mid0
    next_id = 1
    si = 0
    exch = EventFlags(exch=True)
    buy_fl = EventFlags(exch=True, buy=True)
    sell_fl = EventFlags(exch=True, sell=True)

    for i in range(n):
        mid += steps[i] + cfg.mean_reversion * (mid0 - mid)
        if mid < 1.0:
            mid = 2.0 - mid
        kind = draws[i]
        if len(book) < cfg.min_book_orders and kind in (1, 2, 3):
            kind = 0
        u = unif[i]
        if kind == 0:
            side = 1 if u[0] < 0.5 else -1
            bb, ba = book.best_bid(), book.best_ask()
            if side > 0:
                price = math.floor(mid) - offsets[i]
                if ba is not None:
                    price = min(price, book.price(ba) - 1)
            else:
                price = math.ceil(mid) + offsets[i]
                if bb is not None:
                    price = max(price, book.price(bb) + 1)
            price = max(price, 1)
            qty = sizes[si]
            si += 1
            oid = next_id
            next_id = next_id + 1 if next_id < 0xFFFFFFFF else 1
            book.add(oid, side, price, qty)
            code = ADD.code
        elif kind == 1:
            bb, ba = book.best_bid(), book.best_ask()
            if bb is not None and book.price(bb) > mid:
                oid = bb
            elif ba is not None and book.price(ba) < mid:
                oid = ba
            else:
                # of two random resting orders, cancel the one farther from the mid
                a = book.ids[int(u[0] * len(book))]
                b = book.ids[int(u[1] * len(book))]
                oid = a if abs(book.price(a) - mid) >= abs(book.price(b) - mid) else b
            side, price, qty = book.orders[oid]
            book.remove(oid)
            code = CANCEL.code
        elif kind == 2:
            oid = book.ids[int(u[0] * len(book))]
            side, price, qty = book.orders[oid]
            if u[1] < 0.5:
                qty = sizes[si]
                si += 1
                book.orders[oid][2] = qty
            else:
                move = 1 if u[2] < 0.5 else -1
                new = max(price + move, 1)
                if side > 0:
                    ba = book.best_ask()
                    if ba is not None and ba != oid:
                        new = min(new, book.price(ba) - 1)
                else:
                    bb = book.best_bid()
                    if bb is not None and bb != oid:
                        new = max(new, book.price(bb) + 1)
                new = max(new, 1)
                if new != price:
                    book.reprice(oid, new)
                price = new
            code = MODIFY.code
        elif kind == 3:
            oid = book.best_bid() if u[0] < 0.5 else book.best_ask()
            if oid is None:
                oid = book.best_ask() if u[0] < 0.5 else book.best_bid()
            side, price, rest = book.orders[oid]
            if u[1] < 0.5 or rest <= 1:
                qty = rest
                book.remove(oid)
            else:
                qty = float(max(1.0, math.floor(rest * u[2])))
                qty = min(qty, rest - 1)
                book.orders[oid][2] = rest - qty
            code = FILL.code
        else:
            oid, side, price, qty = 0, 0, max(round(mid), 1), 1.0
            code = cfg.other_code
        fl = buy_fl if side > 0 else sell_fl if side < 0 else exch
        out[i] = (pack_ev(oid, code, fl), ts[i], price * cfg.tick_size, qty)

    meta = {"source": "synthetic", "config": asdict(cfg), "duration_s": float(times[-1]) if n else 0.0}
    return EventStream(out, meta)


def gaussian_null_stream(n: int, rate: float = 100.0, sigma: float = 1e-4,
                         mid_price0: float = 87500.0, seed: int = 0,
                         start_ts: int = 1_731_312_000_000_000_000) -> EventStream:
    """Poisson arrivals with i.i.d. Gaussian log-returns: a no-stylized-facts control."""
    rng = np.random.default_rng(seed)
    gaps = rng.exponential(1.0 / rate, size=n)
    ts = start_ts + np.round(np.cumsum(gaps) * 1e9).astype(np.int64)
    price = mid_price0 * np.exp(np.cumsum(rng.normal(0.0, sigma, size=n)))
    side = rng.random(n) < 0.5
    out = np.zeros(n, dtype=EVENT_DTYPE)
    buy = pack_ev(0, ADD, EventFlags(exch=True, buy=True))
    sell = pack_ev(0, ADD, EventFlags(exch=True, sell=True))
    oids = np.arange(1, n + 1, dtype=np.uint64) << np.uint64(32)
    out["ev_packed"] = np.where(side, buy, sell).astype(np.uint64) | oids
    out["exch_ts"] = ts
    out["price"] = price
    out["quantity"] = 1.0
    return EventStream(out, {"source": "gaussian_null", "rate": rate, "sigma": sigma})
