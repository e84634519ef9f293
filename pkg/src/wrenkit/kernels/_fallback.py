"""Pure numpy versions of the compiled kernels in ``_core.pyx``."""

from __future__ import annotations

import math

import numpy as np


def causal_depthwise(x, ctx, taps, bias, dilation):
    T = x.shape[0]
    K = taps.shape[0]
    L = ctx.shape[0]
    xx = np.concatenate([ctx, x], axis=0)
    y = np.broadcast_to(bias, x.shape).astype(np.float64)
    for j in range(K):
        start = L - (K - 1 - j) * dilation
        y = y + taps[j].astype(np.float64) * xx[start:start + T]
    return y.astype(x.dtype)


def se_running_mean(x, count, sums):
    T = x.shape[0]
    if T == 0:
        return np.zeros_like(x), count
    # prepending the carried sum keeps the accumulation order identical to
    # a one-shot cumsum, so chunked and offline means agree bit-for-bit
    cum = np.cumsum(np.vstack([sums[None, :], x.astype(np.float64)]), axis=0)[1:]
    n = count + np.arange(1, T + 1, dtype=np.float64)
    sums[:] = cum[-1]
    return (cum / n[:, None]).astype(x.dtype), count + T


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def gru_scan(xp, h, w_hh, b_hh):
    T = xp.shape[0]
    H = h.shape[0]
    out = np.empty((T, H), dtype=h.dtype)
    w = w_hh.astype(np.float64)
    b = b_hh.astype(np.float64)
    hp = h.astype(np.float64)
    x64 = xp.astype(np.float64)
    for t in range(T):
        a = w @ hp + b
        r = _sigmoid(x64[t, :H] + a[:H])
        z = _sigmoid(x64[t, H:2 * H] + a[H:2 * H])
        n = np.tanh(x64[t, 2 * H:] + r * a[2 * H:])
        hp = (1.0 - z) * hp + z * n
        # round to the storage dtype each frame, as the compiled loop does
        hp = hp.astype(h.dtype).astype(np.float64)
        out[t] = hp
    h[:] = hp
    return out


def attn_scan(hs, v, c, acc, num):
    scores = hs.astype(np.float64) @ v.astype(np.float64) + c
    for t in range(hs.shape[0]):
        s = scores[t]
        if s > acc[0]:
            scale = math.exp(acc[0] - s) if acc[0] != -math.inf else 0.0
            num *= scale
            num += hs[t]
            acc[1] = acc[1] * scale + 1.0
            acc[0] = s
        else:
            e = math.exp(s - acc[0])
            num += e * hs[t]
            acc[1] += e
