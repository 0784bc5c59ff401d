"""Order book reconstruction from a packed event stream."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..codec import ADD, CANCEL, FILL, MODIFY, EventStream, event_codes, order_ids, side_of

CANCELED, FILLED, OPEN = "cancel", "fill", "open"


@dataclass
class Lifecycle:
    order_id: int
    side: int
    birth_ts: int
    death_ts: int | None = None
    cause: str = OPEN
    filled_qty: float = 0.0

    @property
    def lifetime_s(self) -> float | None:
        return None if self.death_ts is None else (self.death_ts - self.birth_ts) / 1e9


class BookState:
    """Price-level aggregates per side plus an index of resting orders."""

    def __init__(self):
        self.bids: dict[float, float] = {}
        self.asks: dict[float, float] = {}
        self.orders: dict[int, list] = {}  # oid -> [side, price, qty]
        self._best_bid = None
        self._best_ask = None

    def _levels(self, side):
        return self.bids if side > 0 else self.asks

    def _place(self, side, price, qty):
        lv = self._levels(side)
        lv[price] = lv.get(price, 0.0) + qty
        if side > 0:
            if self._best_bid is None or price > self._best_bid:
                self._best_bid = price
        elif self._best_ask is None or price < self._best_ask:
            self._best_ask = price

    def _take(self, side, price, qty):
        lv = self._levels(side)
        left = lv[price] - qty
        if left <= 1e-12 * max(1.0, abs(qty)):
            del lv[price]
            if side > 0 and price == self._best_bid:
                self._best_bid = max(lv) if lv else None
            elif side < 0 and price == self._best_ask:
                self._best_ask = min(lv) if lv else None
        else:
            lv[price] = left

    def insert(self, oid, side, price, qty):
        self.orders[oid] = [side, price, qty]
        self._place(side, price, qty)

    def remove(self, oid):
        side, price, qty = self.orders.pop(oid)
        self._take(side, price, qty)

    def update(self, oid, price, qty):
        side, old_p, old_q = self.orders[oid]
        self._take(side, old_p, old_q)
        self.orders[oid] = [side, price, qty]
        self._place(side, price, qty)

    def reduce(self, oid, qty) -> bool:
        """Take ``qty`` off a resting order; True if the order is now gone."""
        side, price, rest = self.orders[oid]
        if qty >= rest:
            self.remove(oid)
            return True
        self.orders[oid][2] = rest - qty
        self._take(side, price, qty)
        return False

    @property
    def best_bid(self):
        return self._best_bid

    @property
    def best_ask(self):
        return self._best_ask

    @property
    def crossed(self) -> bool:
        return self._best_bid is not None and self._best_ask is not None and self._best_bid >= self._best_ask

    def check_conservation(self, tol: float = 1e-9) -> bool:
        """Every level aggregate equals the sum of its resting orders, and vice versa."""
        agg = {1: {}, -1: {}}
        for side, price, qty in self.orders.values():
            agg[side][price] = agg[side].get(price, 0.0) + qty
        for side, lv in ((1, self.bids), (-1, self.asks)):
            if set(lv) != set(agg[side]):
                return False
            if any(abs(lv[p] - agg[side][p]) > tol * max(1.0, abs(lv[p])) for p in lv):
                return False
        bb = max(self.bids) if self.bids else None
        ba = min(self.asks) if self.asks else None
        return bb == self._best_bid and ba == self._best_ask


@dataclass
class Replay:
    spread_ts: np.ndarray
    best_bid: np.ndarray
    best_ask: np.ndarray
    lifecycles: dict
    anomalies: Counter = field(default_factory=Counter)
    final_book: BookState | None = None

    @property
    def spread(self) -> np.ndarray:
        return self.best_ask - self.best_bid

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.best_ask + self.best_bid)

    def lifetimes(self) -> np.ndarray:
        return np.array([lc.lifetime_s for lc in self.lifecycles.values() if lc.death_ts is not None])

    def causes(self) -> Counter:
        return Counter(lc.cause for lc in self.lifecycles.values())


def replay_iter(stream):
    """Yield (index, BookState) after each event; the same object is mutated in place."""
    r = _Replayer(stream)
    for i in range(len(r.ev)):
        r.step(i)
        yield i, r.book


class _Replayer:
    def __init__(self, stream):
        ev = stream.events if isinstance(stream, EventStream) else stream
        self.ev = ev
        self.codes = event_codes(ev)
        self.oids = order_ids(ev)
        self.sides = side_of(ev)
        self.ts = ev["exch_ts"]
        self.px = ev["price"]
        self.qty = ev["quantity"]
        self.book = BookState()
        self.life: dict[int, Lifecycle] = {}
        self.anom = Counter()
        # lifecycle key per live order id (ids can be reused after death)
        self.key: dict[int, int] = {}
        self.next_key = 0

    def _die(self, oid, ts, cause):
        lc = self.life[self.key.pop(oid)]
        lc.death_ts, lc.cause = int(ts), cause

    def step(self, i):
        code, oid, side = int(self.codes[i]), int(self.oids[i]), int(self.sides[i])
        ts, px, q = int(self.ts[i]), float(self.px[i]), float(self.qty[i])
        book = self.book
        valid = np.isfinite(px) and px > 0 and np.isfinite(q) and q > 0
        if code == ADD.code:
            if side == 0:
                self.anom["add_without_side"] += 1
            elif not valid:
                self.anom["invalid_fields"] += 1
            elif oid in book.orders:
                self.anom["duplicate_add"] += 1
            else:
                book.insert(oid, side, px, q)
                self.key[oid] = self.next_key
                self.life[self.next_key] = Lifecycle(oid, side, ts)
                self.next_key += 1
        elif code == MODIFY.code:
            if oid not in book.orders:
                self.anom["unknown_modify"] += 1
            elif not valid:
                self.anom["invalid_fields"] += 1
            else:
                book.update(oid, px, q)
        elif code == CANCEL.code:
            if oid not in book.orders:
                self.anom["unknown_cancel"] += 1
            else:
                book.remove(oid)
                self._die(oid, ts, CANCELED)
        elif code == FILL.code:
            if oid not in book.orders:
                self.anom["unknown_fill"] += 1
            elif not (np.isfinite(q) and q > 0):
                self.anom["invalid_fields"] += 1
            else:
                if q > book.orders[oid][2]:
                    self.anom["overfill"] += 1
                self.life[self.key[oid]].filled_qty += min(q, book.orders[oid][2])
                if book.reduce(oid, q):
                    self._die(oid, ts, FILLED)
        else:
            self.anom["other_event"] += 1


def replay_book(stream) -> Replay:
    """Replay a stream; record top of book after each event and each order's lifecycle.

    Top-of-book samples are kept only when both sides are present and the book
    is not crossed; crossed states are counted as an anomaly.
    """
    r = _Replayer(stream)
    n = len(r.ev)
    ts, bb, ba = [], [], []
    for i in range(n):
        r.step(i)
        b, a = r.book.best_bid, r.book.best_ask
        if b is None or a is None:
            continue
        if b >= a:
            r.anom["crossed_book"] += 1
            continue
        ts.append(int(r.ts[i]))
        bb.append(b)
        ba.append(a)
    return Replay(np.array(ts, dtype=np.int64), np.array(bb, dtype=np.float64),
                  np.array(ba, dtype=np.float64), r.life, r.anom, r.book)
