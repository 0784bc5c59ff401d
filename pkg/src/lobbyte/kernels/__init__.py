"""Hot recurrence kernels with autograd wrappers.

The compiled extension is used when importable; otherwise the numpy fallback
is selected. Set ``LOBBYTE_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np
import torch

from . import _scan_py

try:
    if os.environ.get("LOBBYTE_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("fallback forced by LOBBYTE_PURE_PYTHON")
    from . import _scan as _compiled
except ImportError:  # pragma: no cover - depends on build
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


def get_backend(name=None):
    """Return the kernel module for ``name`` ('compiled', 'python' or None for the default)."""
    if name is None:
        name = BACKEND
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        return _compiled
    if name == "python":
        return _scan_py
    raise ValueError(f"unknown kernel backend {name!r}")


def _np(t):
    return t.detach().contiguous().numpy()


class SelectiveScanFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u, delta, A, B, C, D, reset, backend):
        k = get_backend(backend)
        reset_np = np.ascontiguousarray(reset.numpy().astype(np.uint8))
        y = np.empty(u.shape, dtype=_np(u).dtype)
        k.selective_scan_fwd(_np(u), _np(delta), _np(A), _np(B), _np(C), _np(D), reset_np, y)
        ctx.save_for_backward(u, delta, A, B, C, D)
        ctx.reset_np = reset_np
        ctx.backend = backend
        return torch.from_numpy(y)

    @staticmethod
    def backward(ctx, gy):
        u, delta, A, B, C, D = ctx.saved_tensors
        k = get_backend(ctx.backend)
        dt = _np(u).dtype
        du = np.empty(u.shape, dtype=dt)
        dd = np.empty(delta.shape, dtype=dt)
        dA = np.empty(A.shape, dtype=dt)
        dB = np.empty(B.shape, dtype=dt)
        dC = np.empty(C.shape, dtype=dt)
        dD = np.empty(D.shape, dtype=dt)
        k.selective_scan_bwd(_np(u), _np(delta), _np(A), _np(B), _np(C), _np(D),
                             ctx.reset_np, _np(gy), du, dd, dA, dB, dC, dD)
        return (torch.from_numpy(du), torch.from_numpy(dd), torch.from_numpy(dA),
                torch.from_numpy(dB), torch.from_numpy(dC), torch.from_numpy(dD), None, None)


class EmaScanFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, P, z, backend):
        k = get_backend(backend)
        out = np.empty(z.shape, dtype=_np(z).dtype)
        k.ema_fwd(_np(P), _np(z), out)
        out_t = torch.from_numpy(out)
        ctx.save_for_backward(P, z, out_t)
        ctx.backend = backend
        return out_t

    @staticmethod
    def backward(ctx, g):
        P, z, out = ctx.saved_tensors
        k = get_backend(ctx.backend)
        dP = np.empty(P.shape, dtype=_np(P).dtype)
        dz = np.empty(z.shape, dtype=_np(z).dtype)
        k.ema_bwd(_np(P), _np(z), _np(out), _np(g), dP, dz)
        return torch.from_numpy(dP), torch.from_numpy(dz), None


def selective_scan(u, delta, A, B, C, D, reset=None, backend=None):
    """y[t] = C[t] . h[t] + D * u[t], with h[t] = exp(delta[t] A) h[t-1] + delta[t] B[t] u[t].

    Shapes: u, delta (T, Ch); A (Ch, N); B, C (T, N); D (Ch,); reset (T,) bool,
    where ``reset[t]`` zeroes the carried state before step t.
    """
    if reset is None:
        reset = torch.zeros(u.shape[0], dtype=torch.bool)
        reset[:1] = True
    return SelectiveScanFn.apply(u.contiguous(), delta.contiguous(), A.contiguous(),
                                 B.contiguous(), C.contiguous(), D.contiguous(), reset, backend)


def ema_scan(P, z, backend=None):
    """out[t] = P[t] z[t] + (1 - P[t]) out[t-1], out[-1] = 0."""
    return EmaScanFn.apply(P.contiguous(), z.contiguous(), backend)


def selective_scan_reference(u, delta, A, B, C, D, reset=None):
    """Plain torch loop; differentiable through autograd. Used as the test oracle."""
    T, Ch = u.shape
    h = u.new_zeros(Ch, A.shape[1])
    ys = []
    for t in range(T):
        if reset is not None and bool(reset[t]):
            h = u.new_zeros(Ch, A.shape[1])
        d = delta[t][:, None]
        h = torch.exp(d * A) * h + d * u[t][:, None] * B[t][None, :]
        ys.append(h @ C[t] + D * u[t])
    return torch.stack(ys)


def ema_reference(P, z):
    prev = z.new_zeros(z.shape[1])
    outs = []
    for t in range(z.shape[0]):
        prev = P[t] * z[t] + (1 - P[t]) * prev
        outs.append(prev)
    return torch.stack(outs)
