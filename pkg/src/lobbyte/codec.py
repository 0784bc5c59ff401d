"""Bit-exact 32-byte packed event format.

Layout (little-endian)::

    bytes  0-7   ev_packed  uint64  = (order_id << 32) | ev
    bytes  8-15  exch_ts    int64   nanoseconds since epoch
    bytes 16-23  price      float64
    bytes 24-31  quantity   float64

``ev`` carries the event type in bits 0-7 and flags in bits 28-31; bits 8-27
are reserved (written as zero, ignored on read).
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np

EVENT_SIZE = 32
SOURCE_RECORD_SIZE = 64

EXCH_EVENT = 0x80000000
LOCAL_EVENT = 0x40000000
BUY_EVENT = 0x20000000
SELL_EVENT = 0x10000000
TYPE_MASK = 0xFF
FLAG_MASK = EXCH_EVENT | LOCAL_EVENT | BUY_EVENT | SELL_EVENT

_STRUCT = struct.Struct("<Qqdd")
assert _STRUCT.size == EVENT_SIZE

# numpy view of a packed buffer; same layout as _STRUCT
EVENT_DTYPE = np.dtype([("ev_packed", "<u8"), ("exch_ts", "<i8"),
                        ("price", "<f8"), ("quantity", "<f8")])
assert EVENT_DTYPE.itemsize == EVENT_SIZE


class WrongLength(ValueError):
    pass


class EventKind(enum.IntEnum):
    ADD = 10
    CANCEL = 11
    MODIFY = 12
    FILL = 13


@dataclass(frozen=True)
class EventType:
    """An 8-bit event code; codes outside :class:`EventKind` are OTHER(code)."""

    code: int

    def __post_init__(self):
        if not 0 <= self.code <= 0xFF:
            raise ValueError(f"event code {self.code} outside 0..255")

    @property
    def kind(self) -> EventKind | None:
        try:
            return EventKind(self.code)
        except ValueError:
            return None

    @property
    def is_known(self) -> bool:
        return self.kind is not None

    @property
    def name(self) -> str:
        k = self.kind
        return k.name if k is not None else f"OTHER({self.code})"

    def __repr__(self):
        return self.name


ADD = EventType(EventKind.ADD)
CANCEL = EventType(EventKind.CANCEL)
MODIFY = EventType(EventKind.MODIFY)
FILL = EventType(EventKind.FILL)


def other(code: int) -> EventType:
    return event_type(code)


@dataclass(frozen=True)
class EventFlags:
    exch: bool = False
    local: bool = False
    buy: bool = False
    sell: bool = False

    def __post_init__(self):
        # cached because encode reads it for every event
        object.__setattr__(self, "_bits", (EXCH_EVENT if self.exch else 0) | (LOCAL_EVENT if self.local else 0)
                           | (BUY_EVENT if self.buy else 0) | (SELL_EVENT if self.sell else 0))

    @property
    def bits(self) -> int:
        return self._bits

    @classmethod
    def from_bits(cls, ev: int) -> "EventFlags":
        return cls(exch=bool(ev & EXCH_EVENT), local=bool(ev & LOCAL_EVENT),
                   buy=bool(ev & BUY_EVENT), sell=bool(ev & SELL_EVENT))


@dataclass(frozen=True)
class PackedEvent:
    ev_packed: int
    exch_ts: int
    price: float
    quantity: float

    def to_bytes(self) -> bytes:
        return _STRUCT.pack(self.ev_packed, self.exch_ts, self.price, self.quantity)

    @classmethod
    def from_bytes(cls, b: bytes) -> "PackedEvent":
        if len(b) != EVENT_SIZE:
            raise WrongLength(f"expected {EVENT_SIZE} bytes, got {len(b)}")
        return cls(*_STRUCT.unpack(b))


@dataclass(frozen=True)
class DecodedEvent:
    order_id: int
    event_type: EventType
    flags: EventFlags
    exch_ts: int
    price: float
    quantity: float

    def same_as(self, other: "DecodedEvent") -> bool:
        """Bitwise equality (NaN payloads compare by bit pattern)."""
        return encode_event(self) == encode_event(other)


def pack_ev(order_id: int, event_type: EventType | int, flags: EventFlags) -> int:
    code = event_type.code if isinstance(event_type, EventType) else int(event_type)
    if not 0 <= order_id <= 0xFFFFFFFF:
        raise ValueError(f"order_id {order_id} does not fit in 32 bits")
    if not 0 <= code <= 0xFF:
        raise ValueError(f"event code {code} does not fit in 8 bits")
    return (order_id << 32) | flags.bits | code


# every code and flag combination is interned, so decoding allocates no new instances
_TYPES = tuple(EventType(c) for c in range(256))
_FLAGS = tuple(EventFlags.from_bits(i << 28) for i in range(16))


_new = object.__new__


def event_type(code: int) -> EventType:
    """The interned EventType for an 8-bit code."""
    return _TYPES[code]


def flags_from_nibble(n: int) -> EventFlags:
    """EventFlags for the top four bits of the ev word given as 0..15."""
    return _FLAGS[n]


def unpack_ev(ev_packed: int) -> tuple[int, EventType, EventFlags]:
    return ev_packed >> 32, _TYPES[ev_packed & TYPE_MASK], _FLAGS[(ev_packed >> 28) & 0xF]


def to_packed(e: DecodedEvent) -> PackedEvent:
    return PackedEvent(pack_ev(e.order_id, e.event_type, e.flags), e.exch_ts, e.price, e.quantity)


def from_packed(p: PackedEvent) -> DecodedEvent:
    oid, et, fl = unpack_ev(p.ev_packed)
    return DecodedEvent(oid, et, fl, p.exch_ts, p.price, p.quantity)


def encode_event(e: DecodedEvent) -> bytes:
    oid = e.order_id
    if not 0 <= oid <= 0xFFFFFFFF:
        raise ValueError(f"order_id {oid} does not fit in 32 bits")
    return _STRUCT.pack((oid << 32) | e.flags._bits | e.event_type.code, e.exch_ts, e.price, e.quantity)


def decode_event(b: bytes) -> DecodedEvent:
    if len(b) != EVENT_SIZE:
        raise WrongLength(f"expected {EVENT_SIZE} bytes, got {len(b)}")
    ev, ts, price, qty = _STRUCT.unpack(b)
    # fields are known valid here, so skip the frozen __init__
    e = _new(DecodedEvent)
    e.__dict__.update(order_id=ev >> 32, event_type=_TYPES[ev & TYPE_MASK], flags=_FLAGS[(ev >> 28) & 0xF],
                      exch_ts=ts, price=price, quantity=qty)
    return e


# validation -----------------------------------------------------------------

ZERO_OR_NEGATIVE_PRICE = "zero_or_negative_price"
NON_FINITE_PRICE = "non_finite_price"
ZERO_OR_NEGATIVE_QUANTITY = "zero_or_negative_quantity"
NON_FINITE_QUANTITY = "non_finite_quantity"
UNKNOWN_EVENT_TYPE = "unknown_event_type"
CONFLICTING_SIDE = "conflicting_side"
NEGATIVE_TIMESTAMP = "negative_timestamp"


def validate_event(e: DecodedEvent) -> set[str]:
    """Names of the violated rules; empty when the event is valid."""
    bad = set()
    if not math.isfinite(e.price):
        bad.add(NON_FINITE_PRICE)
    elif e.price <= 0:
        bad.add(ZERO_OR_NEGATIVE_PRICE)
    if not math.isfinite(e.quantity):
        bad.add(NON_FINITE_QUANTITY)
    elif e.quantity <= 0:
        bad.add(ZERO_OR_NEGATIVE_QUANTITY)
    if not e.event_type.is_known:
        bad.add(UNKNOWN_EVENT_TYPE)
    if e.flags.buy and e.flags.sell:
        bad.add(CONFLICTING_SIDE)
    if e.exch_ts < 0:
        bad.add(NEGATIVE_TIMESTAMP)
    return bad


# array helpers ----------------------------------------------------------------

def events_to_array(events) -> np.ndarray:
    """Structured array (EVENT_DTYPE) from PackedEvents or DecodedEvents."""
    rows = []
    for e in events:
        if isinstance(e, DecodedEvent):
            e = to_packed(e)
        rows.append((e.ev_packed, e.exch_ts, e.price, e.quantity))
    return np.array(rows, dtype=EVENT_DTYPE)


def array_from_bytes(buf) -> np.ndarray:
    buf = bytes(buf)
    if len(buf) % EVENT_SIZE:
        raise WrongLength(f"buffer length {len(buf)} is not a multiple of {EVENT_SIZE}")
    return np.frombuffer(buf, dtype=EVENT_DTYPE)


def array_to_events(arr: np.ndarray) -> list[PackedEvent]:
    return [PackedEvent(int(r["ev_packed"]), int(r["exch_ts"]), float(r["price"]),
                        float(r["quantity"])) for r in arr]


def event_codes(arr: np.ndarray) -> np.ndarray:
    return (arr["ev_packed"] & TYPE_MASK).astype(np.uint8)


def order_ids(arr: np.ndarray) -> np.ndarray:
    return (arr["ev_packed"] >> np.uint64(32)).astype(np.uint64)


def side_of(arr: np.ndarray) -> np.ndarray:
    """+1 buy, -1 sell, 0 neither or both."""
    ev = arr["ev_packed"]
    buy = (ev & np.uint64(BUY_EVENT)) != 0
    sell = (ev & np.uint64(SELL_EVENT)) != 0
    return buy.astype(np.int8) - sell.astype(np.int8)


@dataclass
class EventStream:
    """Ordered packed events (structured array) plus provenance metadata."""

    events: np.ndarray
    meta: dict

    def __post_init__(self):
        self.events = np.ascontiguousarray(self.events, dtype=EVENT_DTYPE)

    def __len__(self):
        return len(self.events)

    def to_bytes(self) -> bytes:
        return self.events.tobytes()

    @classmethod
    def from_bytes(cls, buf, meta=None) -> "EventStream":
        return cls(array_from_bytes(buf).copy(), dict(meta or {}))

    def decoded(self) -> list[DecodedEvent]:
        return [from_packed(p) for p in array_to_events(self.events)]
