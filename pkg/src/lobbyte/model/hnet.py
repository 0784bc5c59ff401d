"""Hierarchical next-byte model with learned dynamic chunking between levels."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .chunking import BoundaryDecision, Router, chunk, smooth_dechunk
from .config import ModelConfig, StageLayout
from .layers import RMSNorm, Segments, Stack


@dataclass
class ChunkStats:
    lengths: list[int] = field(default_factory=list)  # positions per level, outermost first

    @property
    def ratios(self) -> list[float]:
        """Realized downsampling per transition (L_s / L_{s+1})."""
        return [a / b for a, b in zip(self.lengths, self.lengths[1:])]


@dataclass
class ForwardResult:
    logits: torch.Tensor
    decisions: list[BoundaryDecision]
    stats: ChunkStats


class Stage(nn.Module):
    def __init__(self, layout: StageLayout, cfg: ModelConfig, level: int, backend=None):
        super().__init__()
        d = cfg.d_model[level]
        self.level = level
        self.is_main = layout.main is not None
        self.backend = backend
        if self.is_main:
            self.main = Stack(layout.main, d, cfg, level, backend)
            return
        d_next = cfg.d_model[level + 1]
        self.encoder = Stack(layout.encoder, d, cfg, level, backend)
        self.router = Router(d)
        self.up = nn.Linear(d, d_next, bias=False)
        self.inner = Stage(layout.inner, cfg, level + 1, backend)
        self.down = nn.Linear(d_next, d, bias=False)
        self.decoder = Stack(layout.decoder, d, cfg, level, backend)

    def forward(self, x, segments: Segments, decisions: list, stats: ChunkStats):
        stats.lengths.append(x.shape[0])
        if self.is_main:
            return self.main(x, segments)
        x_hat = self.encoder(x, segments)
        dec = self.router(x_hat, segments)
        decisions.append(dec)
        inner_in = self.up(chunk(x_hat, dec.b))
        z_hat = self.inner(inner_in, segments.select(dec.b), decisions, stats)
        z_bar = smooth_dechunk(self.down(z_hat), dec.p, dec.b, backend=self.backend)
        return self.decoder(z_bar + x_hat, segments)


class HNet(nn.Module):
    def __init__(self, cfg: ModelConfig, backend: str | None = None):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model[0])
        self.stage = Stage(cfg.stage_layout, cfg, 0, backend)
        self.norm_f = RMSNorm(cfg.d_model[0])
        self.head = nn.Linear(cfg.d_model[0], cfg.vocab_size, bias=False)

    def forward(self, byte_ids: torch.Tensor, segments: Segments | None = None) -> ForwardResult:
        """Logits of shape (T, 256) for packed byte ids of shape (T,)."""
        if byte_ids.ndim != 1 or byte_ids.numel() == 0:
            raise ValueError("expected a non-empty 1-D byte sequence")
        if segments is None:
            segments = Segments.single(byte_ids.numel())
        decisions: list[BoundaryDecision] = []
        stats = ChunkStats()
        x = self.embed(byte_ids.long())
        h = self.stage(x, segments, decisions, stats)
        return ForwardResult(self.head(self.norm_f(h)), decisions, stats)

    def stages(self):
        """Non-main stages, outermost first."""
        s = self.stage
        while not s.is_main:
            yield s
            s = s.inner


def build_model(cfg: ModelConfig, dtype=torch.float32, backend=None) -> HNet:
    """Deterministic construction from ``cfg.seed``."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed)
    try:
        model = HNet(cfg, backend=backend)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)
