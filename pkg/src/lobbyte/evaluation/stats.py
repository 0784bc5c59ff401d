"""Distributional statistics and stylized-fact diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..codec import EventStream, side_of

# sub-tests below this many observations report InsufficientData
MIN_RETURNS = 100
MIN_TAIL = 50


class InsufficientData(ValueError):
    pass


def _prices(x) -> np.ndarray:
    if isinstance(x, EventStream):
        return x.events["price"].astype(np.float64)
    if isinstance(x, np.ndarray) and x.dtype.names:
        return x["price"].astype(np.float64)
    return np.asarray(x, dtype=np.float64)


@dataclass
class LogReturns:
    values: np.ndarray
    n_skipped: int = 0

    def __len__(self):
        return len(self.values)


def compute_log_returns(stream_or_prices) -> LogReturns:
    """r_i = ln(p_i / p_{i-1}) over consecutive valid (positive, finite) prices.

    Invalid prices are removed before differencing and counted in ``n_skipped``.
    """
    p = _prices(stream_or_prices)
    ok = np.isfinite(p) & (p > 0)
    good = p[ok]
    if len(good) < 2:
        raise InsufficientData(f"need at least 2 valid prices, have {len(good)}")
    return LogReturns(np.diff(np.log(good)), int((~ok).sum()))


@dataclass
class ReturnStats:
    """Population moment estimates; kurtosis is excess (raw - 3)."""

    mean: float
    std: float
    skewness: float
    excess_kurtosis: float
    n: int

    @property
    def mean_pct(self):
        return 100.0 * self.mean

    @property
    def std_pct(self):
        return 100.0 * self.std


def return_stats(r) -> ReturnStats:
    r = np.asarray(getattr(r, "values", r), dtype=np.float64)
    if len(r) < 2:
        raise InsufficientData("need at least 2 returns")
    m = r.mean()
    c = r - m
    m2 = (c * c).mean()
    if m2 == 0:
        return ReturnStats(float(m), 0.0, float("nan"), float("nan"), len(r))
    skew = (c ** 3).mean() / m2 ** 1.5
    kurt = (c ** 4).mean() / m2 ** 2 - 3.0
    return ReturnStats(float(m), float(math.sqrt(m2)), float(skew), float(kurt), len(r))


def kl_divergence(sample_p, sample_q, bins: int = 64, smoothing: float = 1e-9) -> float:
    """Histogram KL(P || Q) in nats.

    Both samples share ``bins`` equal-width bins spanning the pooled 0.1% to
    99.9% quantiles; values outside are counted in the end bins. Each bin gets
    ``smoothing`` added before normalizing, which keeps the result finite.
    """
    a = np.asarray(sample_p, dtype=np.float64)
    b = np.asarray(sample_q, dtype=np.float64)
    a, b = a[np.isfinite(a)], b[np.isfinite(b)]
    if len(a) == 0 or len(b) == 0:
        raise InsufficientData("both samples must be non-empty")
    lo, hi = np.quantile(np.concatenate([a, b]), [0.001, 0.999])
    if not hi > lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    ca = np.histogram(np.clip(a, lo, hi), edges)[0].astype(np.float64) + smoothing
    cb = np.histogram(np.clip(b, lo, hi), edges)[0].astype(np.float64) + smoothing
    p, q = ca / ca.sum(), cb / cb.sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


def ks_statistic(sample_a, sample_b) -> float:
    """Two-sample sup |F_a - F_b| evaluated at every pooled observation."""
    a = np.sort(np.asarray(sample_a, dtype=np.float64))
    b = np.sort(np.asarray(sample_b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise InsufficientData("both samples must be non-empty")
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / len(a)
    fb = np.searchsorted(b, pts, side="right") / len(b)
    return float(np.max(np.abs(fa - fb)))


def ks_critical(n_a: int, n_b: int, alpha: float = 0.01) -> float:
    """Large-sample critical value of the two-sample statistic at level alpha."""
    c = math.sqrt(-0.5 * math.log(alpha / 2.0))
    return c * math.sqrt((n_a + n_b) / (n_a * n_b))


def hill_estimator(x, k: int | None = None) -> float:
    """Tail exponent from the k largest observations.

    alpha = k / sum_{i<=k} ln(x_(i) / x_(k+1)) with x_(1) >= x_(2) >= ...
    Default k is 5% of the positive observations (at least 10).
    """
    x = np.asarray(x, dtype=np.float64)
    x = np.sort(x[np.isfinite(x) & (x > 0)])[::-1]
    n = len(x)
    if k is None:
        k = max(10, int(0.05 * n))
    if n < MIN_TAIL or k >= n:
        raise InsufficientData(f"{n} positive observations are too few for k={k}")
    s = np.sum(np.log(x[:k] / x[k]))
    if s <= 0:
        raise InsufficientData("no spread in the upper tail")
    return float(k / s)


def autocorr(x, lags) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    c = x - x.mean()
    v = c @ c
    if v == 0:
        return np.full(len(list(lags)), np.nan)
    return np.array([(c[:-k] @ c[k:]) / v if 0 < k < len(x) else np.nan for k in lags])


def order_flow_imbalance(stream, window: int) -> np.ndarray:
    """(buy volume - sell volume) / (buy + sell) per block of ``window`` events.

    The last block may be shorter. Blocks with no sided volume are NaN (absent).
    """
    if window < 1:
        raise ValueError("window must be at least one event")
    ev = stream.events if isinstance(stream, EventStream) else stream
    side = side_of(ev).astype(np.float64)
    qty = np.where(np.isfinite(ev["quantity"]) & (ev["quantity"] > 0), ev["quantity"], 0.0)
    buy = np.where(side > 0, qty, 0.0)
    sell = np.where(side < 0, qty, 0.0)
    n = len(ev)
    if n == 0:
        return np.zeros(0)
    starts = np.arange(0, n, window)
    bv = np.add.reduceat(buy, starts)
    sv = np.add.reduceat(sell, starts)
    tot = bv + sv
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, (bv - sv) / tot, np.nan)


# stylized facts -----------------------------------------------------------------

@dataclass
class FactResult:
    name: str
    value: float | None = None
    threshold: float | None = None
    flag: bool | None = None
    n: int = 0
    note: str = ""

    @property
    def absent(self):
        return self.value is None


@dataclass
class StylizedFacts:
    facts: dict = field(default_factory=dict)

    def __getitem__(self, k) -> FactResult:
        return self.facts[k]

    def flagged(self, k) -> bool:
        return bool(self.facts[k].flag)


def fat_tail_threshold(n: int) -> float:
    # three standard errors of the excess kurtosis under normality, floored at 1
    return max(1.0, 3.0 * math.sqrt(24.0 / n))


def clustering_threshold(n: int) -> float:
    # three standard errors of a white-noise autocorrelation, floored at 0.02
    return max(0.02, 3.0 / math.sqrt(n))


def _fact(name, fn):
    try:
        return fn()
    except InsufficientData as e:
        return FactResult(name, note=f"insufficient data: {e}")


def stylized_facts(stream, lags: int = 10, prices=None) -> StylizedFacts:
    """Fat tails, volatility clustering, bid-ask bounce, power-law tails, order-flow clustering.

    Flags use fixed documented thresholds: excess kurtosis above
    ``fat_tail_threshold(n)``; mean autocorrelation of |r| over lags 1..L above
    ``clustering_threshold(n)``; lag-1 autocorrelation of nonzero price changes
    below ``-3/sqrt(n)``; order-side autocorrelation at lag 1 above ``3/sqrt(n)``.
    Returns come from ``prices`` when given, else from event prices.
    """
    ev = stream.events if isinstance(stream, EventStream) else stream
    out = StylizedFacts()

    def returns():
        r = compute_log_returns(ev if prices is None else prices).values
        if len(r) < MIN_RETURNS:
            raise InsufficientData(f"{len(r)} returns < {MIN_RETURNS}")
        return r

    def fat():
        r = returns()
        k = return_stats(r).excess_kurtosis
        t = fat_tail_threshold(len(r))
        return FactResult("fat_tails", k, t, bool(np.isfinite(k) and k > t), len(r), "excess kurtosis")

    def clustering():
        r = returns()
        a = autocorr(np.abs(r), range(1, lags + 1))
        m = float(np.nanmean(a)) if np.any(np.isfinite(a)) else None
        if m is None:
            raise InsufficientData("constant |returns|")
        t = clustering_threshold(len(r))
        return FactResult("volatility_clustering", m, t, m > t, len(r), f"mean acf of |r|, lags 1..{lags}")

    def bounce():
        r = returns()
        r = r[r != 0]
        if len(r) < MIN_RETURNS:
            raise InsufficientData(f"{len(r)} nonzero price changes < {MIN_RETURNS}")
        a = float(autocorr(np.sign(r), [1])[0])
        t = -3.0 / math.sqrt(len(r))
        return FactResult("bid_ask_bounce", a, t, bool(a < t), len(r), "lag-1 acf of tick signs")

    def tail_times():
        dt = np.diff(ev["exch_ts"]).astype(np.float64) / 1e9
        return FactResult("inter_event_tail", hill_estimator(dt), None, None, len(dt), "Hill exponent")

    def tail_sizes():
        q = ev["quantity"]
        return FactResult("size_tail", hill_estimator(q), None, None, len(q), "Hill exponent")

    def flow():
        s = side_of(ev)
        s = s[s != 0].astype(np.float64)
        if len(s) < MIN_RETURNS:
            raise InsufficientData(f"{len(s)} sided events < {MIN_RETURNS}")
        a = float(autocorr(s, [1])[0])
        if not np.isfinite(a):
            raise InsufficientData("single-sided flow")
        t = 3.0 / math.sqrt(len(s))
        return FactResult("order_flow_clustering", a, t, a > t, len(s), "lag-1 acf of order side")

    for name, fn in [("fat_tails", fat), ("volatility_clustering", clustering),
                     ("bid_ask_bounce", bounce), ("inter_event_tail", tail_times),
                     ("size_tail", tail_sizes), ("order_flow_clustering", flow)]:
        out.facts[name] = _fact(name, fn)
    return out
