"""Market-quality reports for one stream and side-by-side comparisons."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..codec import ADD, CANCEL, FILL, MODIFY, EventStream, event_codes
from .book import FILLED, Replay, replay_book
from .stats import (InsufficientData, ReturnStats, StylizedFacts, autocorr, compute_log_returns,
                    hill_estimator, kl_divergence, ks_statistic, order_flow_imbalance,
                    return_stats, stylized_facts)

EVENT_TYPE_NAMES = ("ADD", "CANCEL", "MODIFY", "FILL", "OTHER")

# report key -> (display name, units); the first seven are the headline comparison rows
HEADLINE = {
    "event_rate": ("Event Rate (events/sec)", "events/s"),
    "price_volatility_bps": ("Price Volatility (bps)", "bps"),
    "avg_spread_bps": ("Avg Spread (bps)", "bps"),
    "order_lifetime_sec": ("Order Lifetime (sec)", "s"),
    "fill_rate_pct": ("Fill Rate (%)", "%"),
    "price_kl_divergence": ("Price KL Divergence", "nats"),
    "event_ks_statistic": ("Event KS Statistic", "1"),
}


def event_type_frequencies(stream) -> dict[str, float]:
    ev = stream.events if isinstance(stream, EventStream) else stream
    c = event_codes(ev)
    n = len(c)
    if n == 0:
        return {}
    known = {"ADD": ADD.code, "CANCEL": CANCEL.code, "MODIFY": MODIFY.code, "FILL": FILL.code}
    out = {k: float((c == v).sum()) / n for k, v in known.items()}
    out["OTHER"] = float(np.sum(~np.isin(c, list(known.values())))) / n
    return out


@dataclass
class MetricsReport:
    """Statistics for one stream. ``None`` marks an undefined (absent) metric."""

    n_events: int = 0
    duration_s: float | None = None
    event_rate: float | None = None
    price_volatility_bps: float | None = None
    avg_spread_bps: float | None = None
    order_lifetime_sec: float | None = None
    fill_rate_pct: float | None = None
    event_type_frequencies: dict = field(default_factory=dict)
    inter_event_mean_ms: float | None = None
    inter_event_median_ms: float | None = None
    price_mean: float | None = None
    price_std: float | None = None
    price_min: float | None = None
    price_max: float | None = None
    returns: ReturnStats | None = None
    tail_exponent: float | None = None
    abs_return_acf: list = field(default_factory=list)
    ofi_window: int = 100
    price_source: str = "event"
    facts: StylizedFacts | None = None
    anomalies: dict = field(default_factory=dict)
    # comparison-only metrics, filled by compare_streams
    price_kl_divergence: float | None = None
    event_ks_statistic: float | None = None
    return_ks_statistic: float | None = None
    # raw series for tabular output
    series: dict = field(default_factory=dict, repr=False)


def _finite(x):
    return None if x is None or not math.isfinite(x) else float(x)


PRICE_SOURCES = ("event", "mid")


def return_prices(ev, replay: Replay, price_source: str = "event") -> np.ndarray:
    """Price series for returns: each event's price, or the replayed mid after each uncrossed event."""
    if price_source == "event":
        return ev["price"].astype(np.float64)
    if price_source == "mid":
        return replay.mid
    raise ValueError(f"price_source must be one of {PRICE_SOURCES}, got {price_source!r}")


def microstructure_stats(stream, replay: Replay, price_source: str = "event") -> dict:
    """Rate, volatility, spread, lifetime and fill rate from a stream and its replay."""
    ev = stream.events if isinstance(stream, EventStream) else stream
    n = len(ev)
    out = dict(event_rate=None, price_volatility_bps=None, avg_spread_bps=None,
               order_lifetime_sec=None, fill_rate_pct=None, duration_s=None)
    if n == 0:
        return out
    dur = (int(ev["exch_ts"][-1]) - int(ev["exch_ts"][0])) / 1e9
    if dur > 0:
        out["duration_s"] = dur
        out["event_rate"] = n / dur
    try:
        out["price_volatility_bps"] = _finite(
            compute_log_returns(return_prices(ev, replay, price_source)).values.std() * 1e4)
    except InsufficientData:
        pass
    if len(replay.spread_ts):
        out["avg_spread_bps"] = _finite(np.mean(replay.spread / replay.mid) * 1e4)
    lt = replay.lifetimes()
    if len(lt):
        out["order_lifetime_sec"] = float(lt.mean())
    born = len(replay.lifecycles)
    if born:
        filled = sum(1 for lc in replay.lifecycles.values() if lc.cause == FILLED)
        out["fill_rate_pct"] = 100.0 * filled / born
    return out


def build_report(stream, ofi_window: int = 100, lags: int = 10, price_source: str = "event") -> MetricsReport:
    """Full report for one stream. ``price_source`` picks event prices or replayed mids for returns."""
    if price_source not in PRICE_SOURCES:
        raise ValueError(f"price_source must be one of {PRICE_SOURCES}, got {price_source!r}")
    # generated streams can carry huge finite values; overflowing moments become inf/nan
    with np.errstate(over="ignore", invalid="ignore"):
        return _build_report(stream, ofi_window, lags, price_source)


def _build_report(stream, ofi_window, lags, price_source) -> MetricsReport:
    ev = stream.events if isinstance(stream, EventStream) else stream
    rep = MetricsReport(n_events=len(ev), ofi_window=ofi_window, price_source=price_source)
    if len(ev) == 0:
        return rep
    replay = replay_book(ev)
    rp = return_prices(ev, replay, price_source)
    for k, v in microstructure_stats(ev, replay, price_source).items():
        setattr(rep, k, v)
    rep.event_type_frequencies = event_type_frequencies(ev)
    rep.anomalies = dict(replay.anomalies)
    dt_ms = np.diff(ev["exch_ts"]).astype(np.float64) / 1e6
    if len(dt_ms):
        rep.inter_event_mean_ms = float(dt_ms.mean())
        rep.inter_event_median_ms = float(np.median(dt_ms))
    px = ev["price"][np.isfinite(ev["price"]) & (ev["price"] > 0)]
    if len(px):
        rep.price_mean, rep.price_std = float(px.mean()), float(px.std())
        rep.price_min, rep.price_max = float(px.min()), float(px.max())
    r = np.zeros(0)
    try:
        r = compute_log_returns(rp).values
        rep.returns = return_stats(r)
        rep.abs_return_acf = [_finite(a) for a in autocorr(np.abs(r), range(1, lags + 1))]
    except InsufficientData:
        pass
    try:
        rep.tail_exponent = hill_estimator(ev["quantity"])
    except InsufficientData:
        pass
    rep.facts = stylized_facts(ev, lags, prices=rp)
    rep.series = {
        "returns": r,
        "inter_event_ms": dt_ms,
        "prices": ev["price"].astype(np.float64),
        "sizes": ev["quantity"].astype(np.float64),
        "ofi": order_flow_imbalance(ev, ofi_window),
        "spread": np.stack([replay.spread_ts, replay.best_bid, replay.best_ask], 1)
        if len(replay.spread_ts) else np.zeros((0, 3)),
        "lifetimes_s": replay.lifetimes(),
    }
    return rep


@dataclass
class Comparison:
    generated: MetricsReport
    reference: MetricsReport
    distances: dict


def compare_streams(generated, reference, ofi_window: int = 100, price_source: str = "event") -> Comparison:
    """Reports for both streams plus distances between their distributions.

    Price KL uses raw event prices; the event KS statistic compares
    inter-event times; log returns are compared with KS as well.
    """
    g = build_report(generated, ofi_window, price_source=price_source)
    r = build_report(reference, ofi_window, price_source=price_source)
    if g.n_events == 0 or r.n_events == 0:
        raise InsufficientData("both streams must be non-empty")
    d = {"price_kl_divergence": None, "event_ks_statistic": None, "return_ks_statistic": None}
    gp, rp = g.series["prices"], r.series["prices"]
    gp, rp = gp[np.isfinite(gp)], rp[np.isfinite(rp)]
    if len(gp) and len(rp):
        d["price_kl_divergence"] = kl_divergence(gp, rp)
    if len(g.series["inter_event_ms"]) and len(r.series["inter_event_ms"]):
        d["event_ks_statistic"] = ks_statistic(g.series["inter_event_ms"], r.series["inter_event_ms"])
    if len(g.series["returns"]) and len(r.series["returns"]):
        d["return_ks_statistic"] = ks_statistic(g.series["returns"], r.series["returns"])
    for rep in (g, r):
        for k, v in d.items():
            setattr(rep, k, v)
    return Comparison(g, r, d)


# serialization ---------------------------------------------------------------------

def metric_records(rep: MetricsReport) -> list[tuple[str, float | None, str, int]]:
    """(name, value, units, sample size) for every scalar metric; None = absent."""
    n = rep.n_events
    recs = [(HEADLINE[k][0], getattr(rep, k), HEADLINE[k][1], n) for k in HEADLINE]
    recs += [("Number of Events", n, "events", n), ("Duration (seconds)", rep.duration_s, "s", n),
             ("Inter-event Mean (ms)", rep.inter_event_mean_ms, "ms", max(n - 1, 0)),
             ("Inter-event Median (ms)", rep.inter_event_median_ms, "ms", max(n - 1, 0)),
             ("Price Mean", rep.price_mean, "currency", n), ("Price Std. Dev.", rep.price_std, "currency", n),
             ("Price Min", rep.price_min, "currency", n), ("Price Max", rep.price_max, "currency", n)]
    rs = rep.returns
    rn = rs.n if rs else 0
    recs += [("Return Mean (%)", rs and rs.mean_pct, "%", rn), ("Return Std. Dev. (%)", rs and rs.std_pct, "%", rn),
             ("Return Skewness", rs and _finite(rs.skewness), "1", rn),
             ("Return Excess Kurtosis", rs and _finite(rs.excess_kurtosis), "1", rn),
             ("Size Tail Exponent", rep.tail_exponent, "1", n)]
    for k in EVENT_TYPE_NAMES:
        recs.append((f"Event Frequency {k}", rep.event_type_frequencies.get(k), "fraction", n))
    for i, a in enumerate(rep.abs_return_acf, 1):
        recs.append((f"Abs Return ACF lag {i}", a, "1", rn))
    if rep.facts is not None:
        for f in rep.facts.facts.values():
            recs.append((f"Fact {f.name}", f.value, "1", f.n))
            recs.append((f"Fact {f.name} flagged", None if f.flag is None else float(f.flag), "bool", f.n))
    for k, v in sorted(rep.anomalies.items()):
        recs.append((f"Replay anomaly {k}", v, "count", n))
    recs.append(("Return KS Statistic", rep.return_ks_statistic, "1", rn))
    return recs


def _fmt(v):
    return "absent" if v is None else repr(float(v))


def write_metrics_text(path, rep: MetricsReport):
    with open(path, "w") as f:
        f.write("name\tvalue\tunits\tn\n")
        for name, v, units, n in metric_records(rep):
            f.write(f"{name}\t{_fmt(v)}\t{units}\t{n}\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def write_series_csvs(out_dir, rep: MetricsReport, prefix: str):
    out = Path(out_dir)
    s = rep.series
    for name in ("returns", "inter_event_ms", "sizes", "prices", "ofi", "lifetimes_s"):
        vals = s.get(name, np.zeros(0))
        _write_csv(out / f"{prefix}_{name}.csv", ["index", name],
                   ((i, "" if not np.isfinite(v) else repr(float(v))) for i, v in enumerate(vals)))
    sp = s.get("spread", np.zeros((0, 3)))
    _write_csv(out / f"{prefix}_spread.csv", ["exch_ts", "best_bid", "best_ask"],
               ((int(a), repr(float(b)), repr(float(c))) for a, b, c in sp))


def write_report(out_dir, comparison_or_report):
    """Text records plus per-series CSVs. Returns the list of files written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(comparison_or_report, Comparison):
        pairs = [("generated", comparison_or_report.generated), ("reference", comparison_or_report.reference)]
    else:
        pairs = [("stream", comparison_or_report)]
    for prefix, rep in pairs:
        write_metrics_text(out / f"{prefix}_metrics.txt", rep)
        write_series_csvs(out, rep, prefix)
    if len(pairs) == 2:
        g, r = pairs[0][1], pairs[1][1]
        rows = []
        for (name, gv, units, _), (_, rv, _, _) in zip(metric_records(g), metric_records(r)):
            rows.append((name, _fmt(gv), _fmt(rv), units))
        _write_csv(out / "comparison.csv", ["metric", "generated", "reference", "units"], rows)
        _write_csv(out / "event_types.csv", ["event_type", "generated", "reference"],
                   ((k, _fmt(g.event_type_frequencies.get(k)), _fmt(r.event_type_frequencies.get(k)))
                    for k in EVENT_TYPE_NAMES))
    return sorted(p.name for p in out.iterdir())
