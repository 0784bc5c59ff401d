# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled recurrences: selective SSM scan and the EMA dechunk smoother,
plus a single-byte SSM block step for incremental generation.

Both are first-order diagonal linear recurrences evaluated sequentially.
Backward passes recompute the forward states block-by-block over channels
so memory stays at O(T * block * N).
"""
import numpy as np
from libc.math cimport erf, exp, log1p, sqrt

ctypedef fused floating:
    float
    double

cdef int CHANNEL_BLOCK = 32


def selective_scan_fwd(floating[:, ::1] u, floating[:, ::1] delta,
                       floating[:, ::1] A, floating[:, ::1] B,
                       floating[:, ::1] C, floating[::1] D,
                       const unsigned char[::1] reset,
                       floating[:, ::1] y):
    cdef Py_ssize_t T = u.shape[0], Ch = u.shape[1], N = A.shape[1]
    cdef Py_ssize_t t, c, n
    cdef double d, du, acc, a
    cdef double[:, ::1] h = np.zeros((Ch, N), dtype=np.float64)
    with nogil:
        for t in range(T):
            if reset[t]:
                for c in range(Ch):
                    for n in range(N):
                        h[c, n] = 0.0
            for c in range(Ch):
                d = delta[t, c]
                du = d * u[t, c]
                acc = 0.0
                for n in range(N):
                    a = exp(d * A[c, n])
                    h[c, n] = a * h[c, n] + du * B[t, n]
                    acc = acc + C[t, n] * h[c, n]
                y[t, c] = acc + D[c] * u[t, c]
    return np.asarray(h)


def selective_scan_bwd(floating[:, ::1] u, floating[:, ::1] delta,
                       floating[:, ::1] A, floating[:, ::1] B,
                       floating[:, ::1] C, floating[::1] D,
                       const unsigned char[::1] reset,
                       floating[:, ::1] gy,
                       floating[:, ::1] du_out, floating[:, ::1] ddelta_out,
                       floating[:, ::1] dA_out, floating[:, ::1] dB_out,
                       floating[:, ::1] dC_out, floating[::1] dD_out):
    cdef Py_ssize_t T = u.shape[0], Ch = u.shape[1], N = A.shape[1]
    cdef Py_ssize_t t, c, n, c0, c1, cb, k
    cdef double d, uu, g, a, gb, ga, acc_du, acc_dd
    cdef bint carry
    cdef double[:, :, ::1] hs = np.empty((T, CHANNEL_BLOCK, N), dtype=np.float64)
    cdef double[:, :, ::1] decay = np.zeros((T, CHANNEL_BLOCK, N), dtype=np.float64)
    cdef double[:, ::1] gh = np.empty((CHANNEL_BLOCK, N), dtype=np.float64)
    cdef double[:, ::1] dA = np.zeros((Ch, N), dtype=np.float64)
    cdef double[:, ::1] dB = np.zeros((T, N), dtype=np.float64)
    cdef double[:, ::1] dC = np.zeros((T, N), dtype=np.float64)
    cdef double[::1] dD = np.zeros(Ch, dtype=np.float64)

    with nogil:
        c0 = 0
        while c0 < Ch:
            c1 = c0 + CHANNEL_BLOCK
            if c1 > Ch:
                c1 = Ch
            cb = c1 - c0
            # forward, storing states and decays for this channel block
            for t in range(T):
                carry = t > 0 and not reset[t]
                for k in range(cb):
                    c = c0 + k
                    d = delta[t, c]
                    uu = d * u[t, c]
                    if carry:
                        for n in range(N):
                            decay[t, k, n] = exp(d * A[c, n])
                        for n in range(N):
                            hs[t, k, n] = decay[t, k, n] * hs[t - 1, k, n] + uu * B[t, n]
                    else:
                        for n in range(N):
                            hs[t, k, n] = uu * B[t, n]
            for k in range(cb):
                for n in range(N):
                    gh[k, n] = 0.0
            # reverse sweep
            t = T - 1
            while t >= 0:
                carry = t > 0 and not reset[t]
                for k in range(cb):
                    c = c0 + k
                    d = delta[t, c]
                    uu = u[t, c]
                    g = gy[t, c]
                    dD[c] += g * uu
                    acc_du = 0.0
                    acc_dd = 0.0
                    # h_t = a h_{t-1} + d * B * u
                    for n in range(N):
                        dC[t, n] += g * hs[t, k, n]
                        gb = gh[k, n] + g * C[t, n]
                        gh[k, n] = gb
                        acc_du += gb * B[t, n]
                        dB[t, n] += gb * d * uu
                    acc_dd = acc_du * uu
                    acc_du = acc_du * d + g * D[c]
                    if carry:
                        for n in range(N):
                            a = decay[t, k, n]
                            ga = gh[k, n] * hs[t - 1, k, n] * a
                            acc_dd += ga * A[c, n]
                            dA[c, n] += ga * d
                            gh[k, n] = gh[k, n] * a
                    else:
                        for n in range(N):
                            gh[k, n] = 0.0
                    du_out[t, c] = acc_du
                    ddelta_out[t, c] = acc_dd
                t -= 1
            c0 = c1
        for c in range(Ch):
            dD_out[c] = dD[c]
            for n in range(N):
                dA_out[c, n] = dA[c, n]
        for t in range(T):
            for n in range(N):
                dB_out[t, n] = dB[t, n]
                dC_out[t, n] = dC[t, n]


def ema_fwd(floating[::1] P, floating[:, ::1] z, floating[:, ::1] out):
    cdef Py_ssize_t T = z.shape[0], Dm = z.shape[1]
    cdef Py_ssize_t t, j
    cdef double p, prev
    with nogil:
        for t in range(T):
            p = P[t]
            for j in range(Dm):
                if t == 0:
                    prev = 0.0
                else:
                    prev = out[t - 1, j]
                out[t, j] = p * z[t, j] + (1.0 - p) * prev


def ema_bwd(floating[::1] P, floating[:, ::1] z, floating[:, ::1] out,
            floating[:, ::1] g, floating[::1] dP, floating[:, ::1] dz):
    cdef Py_ssize_t T = z.shape[0], Dm = z.shape[1]
    cdef Py_ssize_t t, j
    cdef double p, prev, acc
    cdef double[::1] G = np.zeros(Dm, dtype=np.float64)
    with nogil:
        t = T - 1
        while t >= 0:
            p = P[t]
            acc = 0.0
            for j in range(Dm):
                G[j] += g[t, j]
                if t == 0:
                    prev = 0.0
                else:
                    prev = out[t - 1, j]
                dz[t, j] = p * G[j]
                acc = acc + G[j] * (z[t, j] - prev)
                G[j] = G[j] * (1.0 - p)
            dP[t] = acc
            t -= 1


cdef inline double _silu(double v) noexcept nogil:
    return v / (1.0 + exp(-v))


cdef inline void _matvec(const double[:, ::1] W, const double* x, double* out) noexcept nogil:
    cdef Py_ssize_t i, j, R = W.shape[0], K = W.shape[1]
    cdef double acc
    for i in range(R):
        acc = 0.0
        for j in range(K):
            acc = acc + W[i, j] * x[j]
        out[i] = acc


cdef inline void _rms(const double* x, const double[::1] w, double eps, Py_ssize_t d,
                      double* out) noexcept nogil:
    cdef Py_ssize_t i
    cdef double ss = 0.0
    for i in range(d):
        ss = ss + x[i] * x[i]
    ss = 1.0 / sqrt(ss / d + eps)
    for i in range(d):
        out[i] = x[i] * (w[i] * ss)


cdef class SsmBlockStep:
    """One byte through an isotropic block with an SSM mixer, float64.

    ``buf`` (conv_width - 1, d_inner) holds the previous conv inputs, oldest
    first; ``h`` (d_inner, d_state) is the SSM state. Both are updated in place.
    """
    cdef const double[:, ::1] w_in, conv_w, w_x, w_dt, A, w_out, fc1, fc2
    cdef const double[::1] n1, n2, conv_b, b_dt, D
    cdef double e1, e2
    cdef Py_ssize_t d, di, ns, r, k, f
    cdef double[::1] xn, xz, xc, dbl, y, v, hid

    def __init__(self, n1, e1, n2, e2, w_in, conv_w, conv_b, w_x, w_dt, b_dt, A, D, w_out,
                 fc1, fc2, r, n):
        c = lambda a: np.ascontiguousarray(a, dtype=np.float64)
        self.n1, self.n2, self.conv_b, self.b_dt, self.D = c(n1), c(n2), c(conv_b), c(b_dt), c(D)
        self.w_in, self.conv_w, self.w_x, self.w_dt = c(w_in), c(conv_w), c(w_x), c(w_dt)
        self.A, self.w_out, self.fc1, self.fc2 = c(A), c(w_out), c(fc1), c(fc2)
        self.e1, self.e2 = e1, e2
        self.d, self.di, self.r, self.ns = self.w_out.shape[0], self.w_out.shape[1], r, n
        self.k, self.f = self.conv_w.shape[1], self.fc1.shape[0]
        self.xn = np.empty(self.d)
        self.xz = np.empty(2 * self.di)
        self.xc = np.empty(self.di)
        self.dbl = np.empty(self.w_x.shape[0])
        self.y = np.empty(self.di)
        self.v = np.empty(self.d)
        self.hid = np.empty(self.f)

    def step(self, const double[::1] x, double[:, ::1] buf, double[:, ::1] h):
        out_arr = np.empty(self.d)
        cdef double[::1] out = out_arr
        cdef Py_ssize_t c, j, s, di = self.di, ns = self.ns, r = self.r, k = self.k
        cdef double acc, xv, dt
        with nogil:
            _rms(&x[0], self.n1, self.e1, self.d, &self.xn[0])
            _matvec(self.w_in, &self.xn[0], &self.xz[0])
            # causal depthwise conv over (buf, x)
            for c in range(di):
                xv = self.xz[c]
                acc = self.conv_b[c] + self.conv_w[c, k - 1] * xv
                for j in range(k - 1):
                    acc = acc + self.conv_w[c, j] * buf[j, c]
                for j in range(k - 2):
                    buf[j, c] = buf[j + 1, c]
                if k > 1:
                    buf[k - 2, c] = xv
                self.xc[c] = _silu(acc)
            _matvec(self.w_x, &self.xc[0], &self.dbl[0])
            for c in range(di):
                acc = self.b_dt[c]
                for j in range(r):
                    acc = acc + self.w_dt[c, j] * self.dbl[j]
                # torch's softplus is the identity above 20
                dt = acc if acc > 20.0 else log1p(exp(acc))
                xv = self.xc[c]
                acc = 0.0
                for s in range(ns):
                    h[c, s] = exp(dt * self.A[c, s]) * h[c, s] + dt * xv * self.dbl[r + s]
                    acc = acc + h[c, s] * self.dbl[r + ns + s]
                self.y[c] = (acc + self.D[c] * xv) * _silu(self.xz[di + c])
            _matvec(self.w_out, &self.y[0], &self.v[0])
            for j in range(self.d):
                self.v[j] = self.v[j] + x[j]
            _rms(&self.v[0], self.n2, self.e2, self.d, &self.xn[0])
            _matvec(self.fc1, &self.xn[0], &self.hid[0])
            for j in range(self.f):
                self.hid[j] = 0.5 * self.hid[j] * (1.0 + erf(self.hid[j] * 0.7071067811865476))
            _matvec(self.fc2, &self.hid[0], &out[0])
        return out_arr
