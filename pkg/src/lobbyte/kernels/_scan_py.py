"""Pure-numpy fallback for the compiled recurrences in ``_scan.pyx``.

Same signatures and output-buffer conventions; vectorized over channels,
sequential over time.
"""
import numpy as np
from scipy.special import erf as _erf


def selective_scan_fwd(u, delta, A, B, C, D, reset, y):
    T, Ch = u.shape
    h = np.zeros((Ch, A.shape[1]), dtype=np.float64)
    for t in range(T):
        if reset[t]:
            h[:] = 0.0
        d = delta[t].astype(np.float64)[:, None]
        h = np.exp(d * A) * h + (d * u[t, :, None]) * B[t][None, :]
        y[t] = h @ C[t] + D * u[t]
    return h


def selective_scan_bwd(u, delta, A, B, C, D, reset, gy,
                       du_out, ddelta_out, dA_out, dB_out, dC_out, dD_out):
    T, Ch = u.shape
    N = A.shape[1]
    A64 = A.astype(np.float64)
    hs = np.empty((T, Ch, N), dtype=np.float64)
    h = np.zeros((Ch, N), dtype=np.float64)
    for t in range(T):
        if reset[t]:
            h = np.zeros((Ch, N), dtype=np.float64)
        d = np.float64(1.0) * delta[t][:, None]
        h = np.exp(d * A64) * h + (d * u[t, :, None]) * B[t][None, :]
        hs[t] = h

    gh = np.zeros((Ch, N), dtype=np.float64)
    dA = np.zeros((Ch, N), dtype=np.float64)
    dD = np.zeros(Ch, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        d = np.float64(1.0) * delta[t]
        uu = np.float64(1.0) * u[t]
        g = np.float64(1.0) * gy[t]
        dD += g * uu
        dC_out[t] = g @ hs[t]
        gh = gh + g[:, None] * C[t][None, :]
        du_out[t] = g * D + (gh * B[t][None, :]).sum(1) * d
        dd = (gh * B[t][None, :]).sum(1) * uu
        dB_out[t] = (gh * (d * uu)[:, None]).sum(0)
        if t > 0 and not reset[t]:
            a = np.exp(d[:, None] * A64)
            ga = gh * hs[t - 1]
            dd = dd + (ga * a * A64).sum(1)
            dA += ga * a * d[:, None]
            gh = gh * a
        else:
            gh = np.zeros_like(gh)
        ddelta_out[t] = dd
    dA_out[:] = dA
    dD_out[:] = dD


def ema_fwd(P, z, out):
    prev = np.zeros(z.shape[1], dtype=np.float64)
    for t in range(z.shape[0]):
        prev = P[t] * z[t] + (1.0 - P[t]) * prev
        out[t] = prev


def ema_bwd(P, z, out, g, dP, dz):
    G = np.zeros(z.shape[1], dtype=np.float64)
    for t in range(z.shape[0] - 1, -1, -1):
        G = G + g[t]
        prev = out[t - 1] if t > 0 else np.zeros(z.shape[1])
        dz[t] = P[t] * G
        dP[t] = G @ (z[t] - prev)
        G = G * (1.0 - P[t])


def _rms(x, w, eps):
    return x * (w / np.sqrt(x @ x / x.shape[0] + eps))


def _silu(x):
    return x / (1.0 + np.exp(-x))


class SsmBlockStep:
    """One byte through an isotropic block with an SSM mixer (see ``_scan.pyx``)."""

    def __init__(self, n1, e1, n2, e2, w_in, conv_w, conv_b, w_x, w_dt, b_dt, A, D, w_out,
                 fc1, fc2, r, n):
        self.n1, self.e1, self.n2, self.e2 = n1, e1, n2, e2
        self.w_in, self.conv_b, self.w_x, self.w_dt, self.b_dt = w_in, conv_b, w_x, w_dt, b_dt
        self.A, self.D, self.w_out, self.fc1, self.fc2 = A, D, w_out, fc1, fc2
        self.r, self.n, self.di = r, n, w_out.shape[1]
        # taps for the k-1 previous inputs, oldest first
        self.taps = np.ascontiguousarray(conv_w[:, :-1].T)
        self.tap0 = conv_w[:, -1].copy()

    def step(self, x, buf, h):
        xz = self.w_in @ _rms(x, self.n1, self.e1)
        xs, z = xz[: self.di], xz[self.di:]
        out = xs * self.tap0 + self.conv_b
        if len(buf):
            out += np.einsum("kc,kc->c", buf, self.taps)
            buf[:-1] = buf[1:]
            buf[-1] = xs
        xc = _silu(out)
        dbl = self.w_x @ xc
        r, n = self.r, self.n
        pre = self.w_dt @ dbl[:r] + self.b_dt
        # torch's softplus is the identity above 20
        d = np.where(pre > 20.0, pre, np.log1p(np.exp(np.minimum(pre, 20.0))))[:, None]
        h *= np.exp(d * self.A)
        h += (d * xc[:, None]) * dbl[r:r + n]
        y = h @ dbl[r + n:] + self.D * xc
        v = x + self.w_out @ (y * _silu(z))
        hid = self.fc1 @ _rms(v, self.n2, self.e2)
        return self.fc2 @ (0.5 * hid * (1.0 + _erf(hid / np.sqrt(2.0))))
