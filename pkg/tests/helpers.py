"""Shared builders for the test suite."""
import numpy as np
import torch

from lobbyte.codec import EVENT_DTYPE, EventFlags, EventStream, pack_ev

BUY = EventFlags(exch=True, buy=True)
SELL = EventFlags(exch=True, sell=True)


def ev_row(kind, oid, flags, ts, price, qty):
    return (pack_ev(oid, kind, flags), ts, price, qty)


def make_stream(rows, meta=None) -> EventStream:
    return EventStream(np.array(rows, dtype=EVENT_DTYPE), dict(meta or {}))


def stream_from_prices(prices, dt_ns=1_000_000, sides=None, sizes=None):
    """ADD events at the given prices, evenly spaced in time."""
    n = len(prices)
    sides = np.ones(n, int) if sides is None else np.asarray(sides)
    sizes = np.ones(n) if sizes is None else np.asarray(sizes, float)
    rows = [ev_row(10, i + 1, BUY if s > 0 else SELL, 1_000_000_000 + i * dt_ns, float(p), float(q))
            for i, (p, s, q) in enumerate(zip(prices, sides, sizes))]
    return make_stream(rows)


def central_diff_error(loss_fn, tensors, eps=1e-6):
    """Normwise relative error between autograd and central differences.

    ``tensors`` are leaves that ``loss_fn`` reads; each entry is nudged in place.
    All gradients are flattened into one vector and the error is
    |g - n| / max(|g| + |n|, 1e-12) with Euclidean norms.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    gs, ns = [], []
    for t, g in zip(tensors, grads):
        gs.append((torch.zeros_like(t) if g is None else g).reshape(-1))
        num = torch.zeros_like(t)
        flat, nflat = t.data.view(-1), num.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            lp = loss_fn().item()
            flat[i] = old - eps
            lm = loss_fn().item()
            flat[i] = old
            nflat[i] = (lp - lm) / (2 * eps)
        ns.append(nflat)
    g, n = torch.cat(gs), torch.cat(ns)
    return (g - n).norm().item() / max((g.norm() + n.norm()).item(), 1e-12)


def exhaustive_book_sequences(length=10):
    """Every length-``length`` word over {a, u, c}, rendered as an event stream.

    a = ADD a new order (odd ids buy, even ids sell, never crossing),
    u = MODIFY the newest live order on even steps, FILL 1 unit of it on odd steps,
    c = CANCEL the oldest live order. With no live order, u and c target id 99.
    """
    import itertools

    from lobbyte.codec import ADD, CANCEL, FILL, MODIFY

    for word in itertools.product("auc", repeat=length):
        rows, live, next_id = [], [], 1
        for i, sym in enumerate(word):
            ts = 1_000 * (i + 1)
            if sym == "a":
                k = next_id
                next_id += 1
                buy = k % 2 == 1
                price = 100.0 - k % 3 if buy else 101.0 + k % 3
                rows.append(ev_row(ADD, k, BUY if buy else SELL, ts, price, 2.0))
                live.append([k, buy, price, 2.0])
            elif sym == "u":
                if not live:
                    rows.append(ev_row(FILL if i % 2 else MODIFY, 99, BUY, ts, 100.0, 1.0))
                    continue
                o = live[-1]
                fl = BUY if o[1] else SELL
                if i % 2 == 0:
                    o[2], o[3] = (98.0 if o[1] else 103.0), 3.0
                    rows.append(ev_row(MODIFY, o[0], fl, ts, o[2], 3.0))
                else:
                    rows.append(ev_row(FILL, o[0], fl, ts, o[2], 1.0))
                    o[3] -= 1.0
                    if o[3] <= 0:
                        live.pop()
            else:
                if not live:
                    rows.append(ev_row(CANCEL, 99, BUY, ts, 100.0, 1.0))
                    continue
                o = live.pop(0)
                rows.append(ev_row(CANCEL, o[0], BUY if o[1] else SELL, ts, o[2], o[3]))
        yield word, make_stream(rows)
