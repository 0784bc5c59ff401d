"""Dynamic chunking: boundary routing, chunk selection, EMA dechunking, ratio loss."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .. import kernels
from .layers import Segments

COS_EPS = 1e-8
BOUNDARY_THRESHOLD = 0.5


class DegenerateTarget(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass
class BoundaryDecision:
    p: torch.Tensor  # (T,) boundary probability
    b: torch.Tensor  # (T,) bool boundary indicator

    @property
    def F(self) -> torch.Tensor:
        """Fraction of selected boundaries (no gradient)."""
        return self.b.to(self.p.dtype).mean()

    @property
    def G(self) -> torch.Tensor:
        """Mean boundary probability (carries the gradient)."""
        return self.p.mean()

    @property
    def n_chunks(self) -> int:
        return int(self.b.sum())


def cosine_boundary_prob(q, k, starts):
    """p_t = (1 - cos(q_t, k_{t-1})) / 2, forced to 1 at every sequence start."""
    k_prev = torch.cat([k[:1], k[:-1]], dim=0)
    dot = (q * k_prev).sum(-1)
    denom = torch.clamp(q.norm(dim=-1) * k_prev.norm(dim=-1), min=COS_EPS)
    cos = torch.clamp(dot / denom, -1.0, 1.0)
    p = 0.5 * (1.0 - cos)
    return torch.where(starts, torch.ones_like(p), p)


class Router(nn.Module):
    """Projects encoder outputs and scores adjacent-position dissimilarity."""

    def __init__(self, d: int):
        super().__init__()
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)

    def forward(self, x, segments: Segments) -> BoundaryDecision:
        p = cosine_boundary_prob(self.wq(x), self.wk(x), segments.starts)
        b = (p >= BOUNDARY_THRESHOLD) | segments.starts
        return BoundaryDecision(p=p, b=b)


def chunk(x, b):
    """Keep the positions where b is set, in order."""
    if b.numel() and not bool(b[0]):
        raise ValueError("the first position must be a boundary")
    return x[b]


def smooth_dechunk(z_hat, P, b, backend=None):
    """Upsample chunk vectors to original length through the EMA smoother.

    Position t is governed by the most recent boundary at or before t; the
    output follows zbar_t = P_t * zhat_{c(t)} + (1 - P_t) * zbar_{t-1}, zbar_0 = 0.
    """
    n = int(b.sum())
    if z_hat.shape[0] != n:
        raise LengthMismatch(f"{z_hat.shape[0]} chunk vectors for {n} boundaries")
    if P.shape[0] != b.shape[0]:
        raise LengthMismatch("P and b lengths differ")
    idx = torch.cumsum(b.long(), 0) - 1
    return kernels.ema_scan(P, z_hat[idx], backend=backend)


def ratio_loss(F, G, N):
    """N/(N-1) * ((N-1) F G + (1-F)(1-G)); equals 1 at F = G = 1/N."""
    if N <= 1:
        raise DegenerateTarget(f"ratio target must exceed 1, got {N}")
    return N / (N - 1) * ((N - 1) * F * G + (1 - F) * (1 - G))
