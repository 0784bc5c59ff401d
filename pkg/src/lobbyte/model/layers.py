"""Building blocks: norm, MLP, selective-SSM mixer, causal attention, isotropic block.

All sequence modules operate on a *packed* ragged batch: a single (T, d)
tensor holding every sequence back to back, plus a :class:`Segments`
descriptor marking where each sequence starts. Nothing is padded.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .. import kernels


@dataclass
class Segments:
    starts: torch.Tensor  # (T,) bool, True at the first position of each sequence
    pos: torch.Tensor  # (T,) long, position within its sequence
    seg: torch.Tensor  # (T,) long, sequence index

    @classmethod
    def from_starts(cls, starts: torch.Tensor) -> "Segments":
        starts = starts.bool()
        if starts.numel() and not bool(starts[0]):
            raise ValueError("first position must start a sequence")
        seg = torch.cumsum(starts.long(), 0) - 1
        idx = torch.arange(starts.numel())
        start_idx = torch.where(starts, idx, torch.zeros_like(idx))
        start_idx = torch.cummax(start_idx, 0).values
        return cls(starts=starts, pos=idx - start_idx, seg=seg)

    @classmethod
    def from_lengths(cls, lengths) -> "Segments":
        total = int(sum(lengths))
        starts = torch.zeros(total, dtype=torch.bool)
        offs = 0
        for n in lengths:
            starts[offs] = True
            offs += int(n)
        return cls.from_starts(starts)

    @classmethod
    def single(cls, length: int) -> "Segments":
        return cls.from_lengths([length])

    def select(self, mask: torch.Tensor) -> "Segments":
        return Segments.from_starts(self.starts[mask])

    def __len__(self):
        return self.starts.numel()


class RMSNorm(nn.Module):
    """Scale-invariant per-position normalization with a learned gain, no bias."""

    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(d))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class MLP(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, d, bias=False)

    def forward(self, x, segments=None):
        return self.fc2(F.gelu(self.fc1(x)))


class SelectiveSSM(nn.Module):
    """Selective state-space mixer.

    expand -> split (x, z) -> causal depthwise conv on x -> SiLU ->
    input-dependent (delta, B, C) -> diagonal ZOH recurrence -> gate by SiLU(z)
    -> project back to d_model.
    """

    def __init__(self, d: int, d_state: int = 8, expand: int = 2, conv_width: int = 4,
                 dt_rank: int | None = None, backend: str | None = None):
        super().__init__()
        di = expand * d
        self.d_inner = di
        self.d_state = d_state
        self.conv_width = conv_width
        self.dt_rank = dt_rank or max(1, math.ceil(d / 16))
        self.backend = backend
        self.in_proj = nn.Linear(d, 2 * di, bias=False)
        self.conv_weight = nn.Parameter(torch.empty(di, conv_width))
        self.conv_bias = nn.Parameter(torch.zeros(di))
        nn.init.uniform_(self.conv_weight, -1 / math.sqrt(conv_width), 1 / math.sqrt(conv_width))
        self.x_proj = nn.Linear(di, self.dt_rank + 2 * d_state, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, di, bias=True)
        # dt initialised log-uniform in [1e-3, 1e-1]; bias holds softplus^-1(dt)
        dt = torch.exp(torch.rand(di) * (math.log(0.1) - math.log(1e-3)) + math.log(1e-3))
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))
        a = torch.arange(1, d_state + 1, dtype=torch.float32).repeat(di, 1)
        self.A_log = nn.Parameter(torch.log(a))
        self.D = nn.Parameter(torch.ones(di))
        self.out_proj = nn.Linear(di, d, bias=False)

    @property
    def A(self):
        return -torch.exp(self.A_log)

    def causal_conv(self, x, segments: Segments):
        """Depthwise causal convolution that never reaches across sequence starts."""
        out = x * self.conv_weight[:, -1]
        for k in range(1, self.conv_width):
            shifted = F.pad(x, (0, 0, k, 0))[: x.shape[0]]
            keep = (segments.pos >= k).to(x.dtype)[:, None]
            out = out + shifted * keep * self.conv_weight[:, -1 - k]
        return out + self.conv_bias

    def ssm_params(self, xc):
        dbl = self.x_proj(xc)
        dt, B, C = torch.split(dbl, [self.dt_rank, self.d_state, self.d_state], dim=-1)
        delta = F.softplus(self.dt_proj(dt))
        return delta, B, C

    def forward(self, u, segments: Segments):
        xz = self.in_proj(u)
        x, z = xz.chunk(2, dim=-1)
        xc = F.silu(self.causal_conv(x, segments))
        delta, B, C = self.ssm_params(xc)
        y = kernels.selective_scan(xc, delta, self.A, B, C, self.D, segments.starts,
                                   backend=self.backend)
        return self.out_proj(y * F.silu(z))


def rotary_tables(pos, dim, dtype, base=10000.0):
    inv = 1.0 / (base ** (torch.arange(0, dim, 2, dtype=torch.float64) / dim))
    ang = pos.to(torch.float64)[:, None] * inv[None, :]
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def apply_rotary(x, cos, sin):
    """Rotate the first ``2 * cos.shape[-1]`` channels of x (..., T, hd) pairwise."""
    r = cos.shape[-1] * 2
    x1, x2 = x[..., :r:2], x[..., 1:r:2]
    rot = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1).flatten(-2)
    return torch.cat((rot, x[..., r:]), dim=-1)


class CausalSelfAttention(nn.Module):
    """Multi-head scaled dot-product attention with rotary positions and a causal mask."""

    def __init__(self, d: int, n_heads: int, rotary_dim: int = 0, window: int = -1):
        super().__init__()
        if d % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.rotary_dim = rotary_dim
        self.window = window
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)

    def mask(self, segments: Segments):
        T = len(segments)
        i = torch.arange(T)
        allowed = (segments.seg[:, None] == segments.seg[None, :]) & (i[None, :] <= i[:, None])
        if self.window is not None and self.window >= 0:
            allowed &= (i[:, None] - i[None, :]) < max(self.window, 1)
        return allowed

    def heads(self, x):
        T = x.shape[0]
        return x.view(T, self.n_heads, self.head_dim).transpose(0, 1)

    def weights(self, x, segments: Segments):
        """Attention probabilities, shape (heads, T, T)."""
        q, k = self.heads(self.wq(x)), self.heads(self.wk(x))
        if self.rotary_dim:
            cos, sin = rotary_tables(segments.pos, self.rotary_dim, x.dtype)
            q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~self.mask(segments), float("-inf"))
        return torch.softmax(scores, dim=-1)

    def forward(self, x, segments: Segments):
        att = self.weights(x, segments)
        v = self.heads(self.wv(x))
        out = (att @ v).transpose(0, 1).reshape(x.shape[0], -1)
        return self.wo(out)


class IsotropicBlock(nn.Module):
    """h = MLP(Norm(x + Mixer(Norm(x))))."""

    def __init__(self, mixer: nn.Module, mlp: nn.Module, norm1: nn.Module, norm2: nn.Module):
        super().__init__()
        self.mixer = mixer
        self.mlp = mlp
        self.norm1 = norm1
        self.norm2 = norm2

    def forward(self, x, segments: Segments):
        m = self.mixer(self.norm1(x), segments) if _takes_segments(self.mixer) else self.mixer(self.norm1(x))
        return self.mlp(self.norm2(x + m))


def _takes_segments(mod):
    return isinstance(mod, (SelectiveSSM, CausalSelfAttention))


def make_block(kind: str, d: int, cfg, level: int, backend=None) -> IsotropicBlock:
    if kind == "m":
        mixer = SelectiveSSM(d, d_state=cfg.ssm_state, expand=cfg.ssm_expand,
                             conv_width=cfg.conv_width, backend=backend)
    elif kind == "T":
        mixer = CausalSelfAttention(d, cfg.n_heads, rotary_dim=cfg.rotary_dim, window=cfg.window)
    else:
        raise ValueError(f"unknown block kind {kind!r}")
    return IsotropicBlock(mixer, MLP(d, cfg.ffn_dim(level)), RMSNorm(d), RMSNorm(d))


class Stack(nn.Module):
    def __init__(self, kinds, d, cfg, level, backend=None):
        super().__init__()
        self.kinds = list(kinds)
        self.blocks = nn.ModuleList(make_block(k, d, cfg, level, backend) for k in self.kinds)

    def forward(self, x, segments: Segments):
        for blk in self.blocks:
            x = blk(x, segments)
        return x
