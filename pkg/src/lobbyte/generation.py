"""Constrained autoregressive generation of packed event streams.

Sampling runs on :class:`StepEngine`, an incremental float64 re-implementation
of the model forward that carries per-layer state (SSM hidden state and conv
window, attention key/value cache, router's previous key, dechunk EMA) so each
new byte costs one step instead of a full recompute. The model conditions on
a bounded window of recent events; when the window fills, the engine is reset
and re-primed from the most recent events, which is exactly what a full
forward over that window computes.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.special import erf

from . import kernels
from .codec import (EVENT_DTYPE, EVENT_SIZE, EventStream, PackedEvent, decode_event,
                    validate_event)
from .model.chunking import BOUNDARY_THRESHOLD, COS_EPS
from .model.layers import CausalSelfAttention, SelectiveSSM, Segments

_TS = slice(8, 16)


class NonFiniteLogits(ValueError):
    pass


@dataclass
class GenConfig:
    temperature: float = 1.0
    max_events: int = 1000
    retry_limit: int = 3
    seed: int = 0
    prompt: bytes | None = None
    drop_invalid: bool = False
    max_context_events: int = 16
    prime_events: int = 8
    # first byte of an unprompted stream (an event-type byte; 10 = ADD)
    bos_byte: int = 10

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.retry_limit < 0 or self.max_events < 0:
            raise ValueError("retry_limit and max_events must be non-negative")
        if not 0 < self.prime_events < self.max_context_events:
            raise ValueError("need 0 < prime_events < max_context_events")
        if self.prompt is not None and len(self.prompt) % EVENT_SIZE:
            raise ValueError("prompt length must be a multiple of 32")

    def summary_dict(self) -> dict:
        d = asdict(self)
        d["prompt"] = None if self.prompt is None else len(self.prompt) // EVENT_SIZE
        return d


def sample_next_byte(logits, temperature: float, rng: np.random.Generator) -> int:
    """Draw from softmax(logits / temperature) by inverse CDF on one uniform."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteLogits("logits contain NaN or infinity")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = (z - z.max()) / temperature
    p = np.exp(z)
    c = np.cumsum(p)
    i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return min(i, len(c) - 1)


# incremental forward ----------------------------------------------------------

def _np(t):
    return t.detach().to(torch.float64).cpu().numpy()


def _rms(x, w, eps):
    return x * (w / math.sqrt(x @ x / x.shape[0] + eps))


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


class _AttnStep:
    def __init__(self, m: CausalSelfAttention):
        self.wq, self.wk, self.wv, self.wo = (_np(m.wq.weight), _np(m.wk.weight),
                                              _np(m.wv.weight), _np(m.wo.weight))
        self.h, self.hd, self.rd = m.n_heads, m.head_dim, m.rotary_dim
        self.window = m.window if m.window is not None and m.window >= 0 else None
        if self.rd:
            self.inv = 1.0 / (10000.0 ** (np.arange(0, self.rd, 2, dtype=np.float64) / self.rd))

    def init(self):
        return {"k": np.zeros((self.h, 64, self.hd)), "v": np.zeros((self.h, 64, self.hd)), "n": 0, "pos": 0}

    def _rot(self, x, pos):
        if not self.rd:
            return x
        ang = pos * self.inv
        c, s = np.cos(ang), np.sin(ang)
        x1, x2 = x[:, : self.rd:2].copy(), x[:, 1: self.rd:2]
        x[:, : self.rd:2] = x1 * c - x2 * s
        x[:, 1: self.rd:2] = x1 * s + x2 * c
        return x

    def __call__(self, x, s):
        q = self._rot((self.wq @ x).reshape(self.h, self.hd), s["pos"])
        k = self._rot((self.wk @ x).reshape(self.h, self.hd), s["pos"])
        v = (self.wv @ x).reshape(self.h, self.hd)
        s["pos"] += 1
        n = s["n"]
        K, V = s["k"], s["v"]
        if self.window is not None and n == max(self.window, 1):
            K[:, :-1] = K[:, 1:].copy()
            V[:, :-1] = V[:, 1:].copy()
            n -= 1
        elif n == K.shape[1]:
            K = s["k"] = np.concatenate([K, np.zeros_like(K)], 1)
            V = s["v"] = np.concatenate([V, np.zeros_like(V)], 1)
        K[:, n], V[:, n] = k, v
        n = s["n"] = n + 1
        sc = np.einsum("hd,htd->ht", q, K[:, :n]) / math.sqrt(self.hd)
        sc = np.exp(sc - sc.max(-1, keepdims=True))
        att = sc / sc.sum(-1, keepdims=True)
        return self.wo @ np.einsum("ht,htd->hd", att, V[:, :n]).reshape(-1)


class _BlockStep:
    def __init__(self, blk, backend=None):
        n1, e1 = _np(blk.norm1.weight), blk.norm1.eps
        n2, e2 = _np(blk.norm2.weight), blk.norm2.eps
        fc1, fc2 = _np(blk.mlp.fc1.weight), _np(blk.mlp.fc2.weight)
        m = blk.mixer
        if isinstance(m, SelectiveSSM):
            self.ssm = kernels.get_backend(backend).SsmBlockStep(
                n1, e1, n2, e2, _np(m.in_proj.weight), _np(m.conv_weight), _np(m.conv_bias),
                _np(m.x_proj.weight), _np(m.dt_proj.weight), _np(m.dt_proj.bias),
                -np.exp(_np(m.A_log)), _np(m.D), _np(m.out_proj.weight), fc1, fc2,
                m.dt_rank, m.d_state)
            self.k, self.di, self.n = m.conv_width, m.d_inner, m.d_state
            return
        self.ssm = None
        self.mixer = _AttnStep(m)
        self.n1, self.e1, self.n2, self.e2, self.fc1, self.fc2 = n1, e1, n2, e2, fc1, fc2

    def init(self):
        if self.ssm is not None:
            return {"buf": np.zeros((self.k - 1, self.di)), "h": np.zeros((self.di, self.n))}
        return self.mixer.init()

    def __call__(self, x, s):
        if self.ssm is not None:
            return self.ssm.step(x, s["buf"], s["h"])
        m = self.mixer(_rms(x, self.n1, self.e1), s)
        return self.fc2 @ _gelu(self.fc1 @ _rms(x + m, self.n2, self.e2))


class _StageStep:
    def __init__(self, stage):
        self.is_main = stage.is_main
        if self.is_main:
            self.main = [_BlockStep(b) for b in stage.main.blocks]
            return
        self.enc = [_BlockStep(b) for b in stage.encoder.blocks]
        self.dec = [_BlockStep(b) for b in stage.decoder.blocks]
        self.wq, self.wk = _np(stage.router.wq.weight), _np(stage.router.wk.weight)
        self.up, self.down = _np(stage.up.weight), _np(stage.down.weight)
        self.inner = _StageStep(stage.inner)

    def init(self):
        if self.is_main:
            return {"main": [b.init() for b in self.main]}
        return {"enc": [b.init() for b in self.enc], "dec": [b.init() for b in self.dec],
                "k_prev": None, "chunk": None, "zbar": None, "inner": self.inner.init(),
                "boundaries": 0, "positions": 0}

    def __call__(self, x, s):
        if self.is_main:
            for b, st in zip(self.main, s["main"]):
                x = b(x, st)
            return x
        for b, st in zip(self.enc, s["enc"]):
            x = b(x, st)
        q, k = self.wq @ x, self.wk @ x
        if s["k_prev"] is None:
            p, bnd = 1.0, True
        else:
            kp = s["k_prev"]
            denom = max(np.linalg.norm(q) * np.linalg.norm(kp), COS_EPS)
            cos = min(max(float(q @ kp) / denom, -1.0), 1.0)
            p = 0.5 * (1.0 - cos)
            bnd = p >= BOUNDARY_THRESHOLD
        s["k_prev"] = k
        s["positions"] += 1
        if bnd:
            s["boundaries"] += 1
            s["chunk"] = self.down @ self.inner(self.up @ x, s["inner"])
        zbar = p * s["chunk"] if s["zbar"] is None else p * s["chunk"] + (1.0 - p) * s["zbar"]
        s["zbar"] = zbar
        h = zbar + x
        for b, st in zip(self.dec, s["dec"]):
            h = b(h, st)
        return h


class StepEngine:
    """Byte-at-a-time float64 forward for an :class:`HNet`."""

    def __init__(self, model):
        self.embed = _np(model.embed.weight)
        self.norm_f, self.eps_f = _np(model.norm_f.weight), model.norm_f.eps
        self.head = _np(model.head.weight)
        self.stage = _StageStep(model.stage)
        self.reset()

    def reset(self):
        self.state = self.stage.init()
        self.n_fed = 0

    def feed(self, byte: int) -> np.ndarray:
        """Consume one byte; return logits for the next one."""
        h = self.stage(self.embed[int(byte)], self.state)
        self.n_fed += 1
        return self.head @ _rms(h, self.norm_f, self.eps_f)

    def feed_many(self, data) -> np.ndarray | None:
        logits = None
        for b in bytes(data):
            logits = self.feed(b)
        return logits

    def snapshot(self):
        return copy.deepcopy(self.state), self.n_fed

    def restore(self, snap):
        state, n = snap
        self.state = copy.deepcopy(state)
        self.n_fed = n


def recompute_logits(model, context: bytes) -> np.ndarray:
    """Reference path: full forward over ``context``; logits for the byte after it."""
    ids = torch.tensor(list(context), dtype=torch.long)
    if next(model.parameters()).dtype != torch.float64:
        model = copy.deepcopy(model).double()
    with torch.no_grad():
        out = model(ids, Segments.single(len(ids)))
    return out.logits[-1].numpy()


# event-level generation ---------------------------------------------------------

def _ts(ev: bytes) -> int:
    return int.from_bytes(ev[_TS], "little", signed=True)


def _with_ts(ev: bytes, ts: int) -> bytes:
    return ev[:8] + int(ts).to_bytes(8, "little", signed=True) + ev[16:]


def _sample_event(engine: StepEngine, logits, first_byte, cfg: GenConfig, rng) -> bytes:
    out = bytearray()
    for i in range(EVENT_SIZE):
        b = first_byte if (i == 0 and first_byte is not None) else sample_next_byte(logits, cfg.temperature, rng)
        out.append(b)
        if i < EVENT_SIZE - 1:
            logits = engine.feed(b)
    return bytes(out)


def generate_event(model, context_bytes: bytes, cfg: GenConfig, rng) -> bytes:
    """Sample one 32-byte event conditioned on ``context_bytes`` (recent events only)."""
    if len(context_bytes) % EVENT_SIZE:
        raise ValueError("context length must be a multiple of 32")
    engine = model if isinstance(model, StepEngine) else StepEngine(model)
    engine.reset()
    window = context_bytes[-cfg.max_context_events * EVENT_SIZE:] if context_bytes else b""
    logits = engine.feed_many(window)
    return _sample_event(engine, logits, cfg.bos_byte if logits is None else None, cfg, rng)


CLEAN, REGENERATED, CORRECTED = "clean", "regenerated", "corrected"


def enforce_monotonic(prev_ts, candidate: bytes, regenerate, retry_limit: int) -> tuple[bytes, str, int]:
    """Accept, regenerate up to ``retry_limit`` times, or clamp the timestamp to ``prev_ts``.

    ``regenerate()`` returns a fresh 32-byte candidate drawn from the same
    context. Returns (event bytes, outcome, number of regenerations used).
    """
    if prev_ts is None or _ts(candidate) >= prev_ts:
        return candidate, CLEAN, 0
    for attempt in range(1, retry_limit + 1):
        candidate = regenerate()
        if _ts(candidate) >= prev_ts:
            return candidate, REGENERATED, attempt
    return _with_ts(candidate, prev_ts), CORRECTED, retry_limit


@dataclass
class GenerationResult:
    events: EventStream
    n_clean: int = 0
    n_regenerated: int = 0
    n_ts_corrected: int = 0
    n_invalid_fields: int = 0
    n_dropped_invalid: int = 0
    n_retries: int = 0
    invalid_rules: dict = field(default_factory=dict)

    @property
    def n_generated(self) -> int:
        return self.n_clean + self.n_regenerated + self.n_ts_corrected

    def summary(self) -> dict:
        return {"events_written": len(self.events), "n_generated": self.n_generated,
                "n_clean": self.n_clean, "n_regenerated": self.n_regenerated,
                "n_ts_corrected": self.n_ts_corrected, "n_invalid_fields": self.n_invalid_fields,
                "n_dropped_invalid": self.n_dropped_invalid, "n_retries": self.n_retries,
                "invalid_rules": dict(sorted(self.invalid_rules.items()))}


def generate_stream(model, cfg: GenConfig, progress=None) -> GenerationResult:
    """Generate ``cfg.max_events`` events with the monotonic-timestamp policy applied to each."""
    rng = np.random.default_rng(cfg.seed)
    engine = model if isinstance(model, StepEngine) else StepEngine(model)
    res = GenerationResult(EventStream(np.zeros(0, dtype=EVENT_DTYPE), {}))
    context: list[bytes] = []
    prev_ts = None
    if cfg.prompt:
        context = [cfg.prompt[i:i + EVENT_SIZE] for i in range(0, len(cfg.prompt), EVENT_SIZE)]
        prev_ts = max(_ts(e) for e in context)
    kept: list[bytes] = []

    def prime():
        engine.reset()
        window = context[-cfg.max_context_events:] if len(context) < cfg.max_context_events \
            else context[-cfg.prime_events:]
        return engine.feed_many(b"".join(window))

    logits = prime()
    for i in range(cfg.max_events):
        if len(context) >= cfg.max_context_events and engine.n_fed >= cfg.max_context_events * EVENT_SIZE:
            logits = prime()
        first = cfg.bos_byte if logits is None else None
        snap = engine.snapshot()

        def draw():
            engine.restore(snap)
            return _sample_event(engine, logits, first, cfg, rng)

        cand = _sample_event(engine, logits, first, cfg, rng)
        ev, outcome, used = enforce_monotonic(prev_ts, cand, draw, cfg.retry_limit)
        res.n_retries += used
        if outcome == CLEAN:
            res.n_clean += 1
        elif outcome == REGENERATED:
            res.n_regenerated += 1
        else:
            res.n_ts_corrected += 1
            engine.restore(snap)
            engine.feed_many(ev[:-1])
        logits = engine.feed(ev[-1])
        context.append(ev)
        prev_ts = _ts(ev)

        bad = validate_event(decode_event(ev))
        if bad:
            res.n_invalid_fields += 1
            for r in bad:
                res.invalid_rules[r] = res.invalid_rules.get(r, 0) + 1
            if cfg.drop_invalid:
                res.n_dropped_invalid += 1
                continue
        kept.append(ev)
        if progress is not None:
            progress(i + 1)
    arr = np.frombuffer(b"".join(kept), dtype=EVENT_DTYPE).copy() if kept else np.zeros(0, dtype=EVENT_DTYPE)
    res.events = EventStream(arr, {"source": "generated", "config": cfg.summary_dict()})
    return res


def write_summary(path, result: GenerationResult, extra: dict | None = None):
    rec = result.summary()
    rec.update(extra or {})
    Path(path).write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")
