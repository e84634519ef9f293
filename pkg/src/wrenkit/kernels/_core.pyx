# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-frame loops for the streaming runtime.

Every function mirrors the signature of its counterpart in ``_fallback``.
State arguments are updated in place.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, tanh
from scipy.linalg.cython_blas cimport dgemv, sgemv

cnp.import_array()


cdef inline double _sigmoid(double z) nogil:
    cdef double e
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


def causal_depthwise(floating[:, ::1] x, floating[:, ::1] ctx,
                     floating[:, ::1] taps, floating[::1] bias, int dilation):
    cdef Py_ssize_t T = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t K = taps.shape[0], L = ctx.shape[0]
    cdef Py_ssize_t t, c, j, src
    cdef double acc
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((T, C), dtype=dtype)
    cdef floating[:, ::1] y = out
    with nogil:
        for t in range(T):
            for c in range(C):
                acc = bias[c]
                for j in range(K):
                    src = t + L - (K - 1 - j) * dilation
                    if src < L:
                        acc = acc + taps[j, c] * ctx[src, c]
                    else:
                        acc = acc + taps[j, c] * x[src - L, c]
                y[t, c] = <floating>acc
    return out


def se_running_mean(floating[:, ::1] x, long long count, double[::1] sums):
    cdef Py_ssize_t T = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t t, c
    cdef double n
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((T, C), dtype=dtype)
    cdef floating[:, ::1] m = out
    with nogil:
        for t in range(T):
            count += 1
            n = <double>count
            for c in range(C):
                sums[c] = sums[c] + <double>x[t, c]
                m[t, c] = <floating>(sums[c] / n)
    return out, count


cdef inline void _matvec(floating[:, ::1] w, floating[::1] x, floating[::1] y) nogil:
    # y = w @ x for C-contiguous w, i.e. w^T in column-major BLAS terms
    cdef int m = w.shape[1], n = w.shape[0], inc = 1
    cdef char trans = b"T"
    cdef float sone = 1.0, szero = 0.0
    cdef double done = 1.0, dzero = 0.0
    if floating is float:
        sgemv(&trans, &m, &n, &sone, &w[0, 0], &m, &x[0], &inc, &szero, &y[0], &inc)
    else:
        dgemv(&trans, &m, &n, &done, &w[0, 0], &m, &x[0], &inc, &dzero, &y[0], &inc)


def gru_scan(floating[:, ::1] xp, floating[::1] h, floating[:, ::1] w_hh,
             floating[::1] b_hh):
    cdef Py_ssize_t T = xp.shape[0], H = h.shape[0]
    cdef Py_ssize_t t, i
    cdef double r, z, nn
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((T, H), dtype=dtype)
    cdef floating[:, ::1] hs = out
    cdef floating[::1] a = np.empty(3 * H, dtype=dtype)
    with nogil:
        for t in range(T):
            _matvec(w_hh, h, a)
            for i in range(H):
                r = _sigmoid(<double>xp[t, i] + (<double>a[i] + b_hh[i]))
                z = _sigmoid(<double>xp[t, H + i] + (<double>a[H + i] + b_hh[H + i]))
                nn = tanh(<double>xp[t, 2 * H + i] + r * (<double>a[2 * H + i] + b_hh[2 * H + i]))
                h[i] = <floating>((1.0 - z) * h[i] + z * nn)
                hs[t, i] = h[i]
    return out


def attn_scan(floating[:, ::1] hs, floating[::1] v, double c,
              double[::1] acc, double[::1] num):
    """acc = [running max score, denominator]; num = weighted sum of h."""
    cdef Py_ssize_t T = hs.shape[0], H = hs.shape[1]
    cdef Py_ssize_t t, i
    cdef double s, scale, e
    with nogil:
        for t in range(T):
            s = c
            for i in range(H):
                s = s + v[i] * hs[t, i]
            if s > acc[0]:
                scale = exp(acc[0] - s)
                for i in range(H):
                    num[i] = num[i] * scale + hs[t, i]
                acc[1] = acc[1] * scale + 1.0
                acc[0] = s
            else:
                e = exp(s - acc[0])
                for i in range(H):
                    num[i] = num[i] + e * hs[t, i]
                acc[1] = acc[1] + e
