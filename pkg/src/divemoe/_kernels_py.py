"""Pure-numpy implementations of the hot kernels.

Mirror of the compiled extension in `_kernels.pyx`; `divemoe.kernels` picks
one of the two at import time. Forward kernels return fresh arrays; backward
kernels accumulate (`+=`) into the caller's gradient buffers. All array
arguments are C-contiguous float32 unless noted.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def swish_fwd(x):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x))
        return (x * s).astype(np.float32, copy=False)


def swish_bwd(x, dy, dx):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x))
        dx += dy * (s + x * s * (1.0 - s))


def rmsnorm_fwd(x, g, eps):
    # x: [N, D]; returns (y, inv_rms[N]); mean-square accumulated in f64 to
    # match the compiled lane's double accumulators
    ms = np.mean(np.square(x, dtype=np.float64), axis=1)
    inv = (1.0 / np.sqrt(ms + float(eps))).astype(np.float32)
    y = x * inv[:, None] * g[None, :]
    return y.astype(np.float32, copy=False), inv


def rmsnorm_bwd(x, g, inv, dy, dx, dg):
    d = x.shape[1]
    dyg = dy * g[None, :]
    dot = np.sum((dyg * x).astype(np.float64), axis=1, keepdims=True).astype(np.float32)
    dx += dyg * inv[:, None] - x * (dot * (inv[:, None] ** 3) / np.float32(d))
    dg += np.sum((dy * x).astype(np.float64) * inv[:, None].astype(np.float64), axis=0).astype(np.float32)


def softmax_temp_fwd(z, t):
    # rowwise softmax of z/t with max subtraction; z: [N, M]
    zt = z / np.float32(t)
    zt -= zt.max(axis=1, keepdims=True)
    e = np.exp(zt)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32, copy=False)


def softmax_temp_bwd(y, dy, t, dz):
    s = np.sum(dy * y, axis=1, keepdims=True)
    dz += y * (dy - s) / np.float32(t)


def causal_softmax_fwd(z):
    # z: [R, T, T]; row i of each RxT block normalizes over columns 0..i,
    # later columns get exactly 0 so causality is exact, not approximate
    t = z.shape[1]
    mask = np.tril(np.ones((t, t), dtype=bool))
    zm = np.where(mask[None, :, :], z, np.float32(-np.inf))
    zm -= zm.max(axis=2, keepdims=True)
    e = np.exp(zm)
    return (e / e.sum(axis=2, keepdims=True)).astype(np.float32, copy=False)


def causal_softmax_bwd(y, dy, dz):
    s = np.sum(dy * y, axis=2, keepdims=True)
    dz += y * (dy - s)


def masked_softmax_fwd(z, mask, t):
    # mask: uint8 [N, M], 1 = participate; masked-out entries get exactly 0
    zt = z / np.float32(t)
    zm = np.where(mask.astype(bool), zt, np.float32(-np.inf))
    zm -= zm.max(axis=1, keepdims=True)
    e = np.exp(zm)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32, copy=False)


def masked_softmax_bwd(y, mask, dy, t, dz):
    s = np.sum(dy * y, axis=1, keepdims=True)
    dz += y * (dy - s) / np.float32(t)


def cross_entropy_fwd(logits, targets):
    # logits: [N, V], targets: int64 [N]; returns (softmax probs, total nll)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    denom = e.sum(axis=1, keepdims=True)
    probs = (e / denom).astype(np.float32, copy=False)
    n = logits.shape[0]
    lse = (m[:, 0].astype(np.float64) + np.log(denom[:, 0].astype(np.float64)))
    picked = logits[np.arange(n), targets].astype(np.float64)
    total = float(np.sum(lse - picked))
    return probs, total


def cross_entropy_bwd(probs, targets, scale, dlogits):
    n = probs.shape[0]
    dlogits += probs * np.float32(scale)
    dlogits[np.arange(n), targets] -= np.float32(scale)


def rope_fwd(x, cos, sin):
    # x: [R, T, H]; half-dim pairing (j, j+H/2); cos/sin: [T, H/2]
    h2 = x.shape[2] // 2
    x1, x2 = x[:, :, :h2], x[:, :, h2:]
    y = np.empty_like(x)
    y[:, :, :h2] = x1 * cos[None] - x2 * sin[None]
    y[:, :, h2:] = x1 * sin[None] + x2 * cos[None]
    return y


def rope_bwd(dy, cos, sin, dx):
    h2 = dy.shape[2] // 2
    d1, d2 = dy[:, :, :h2], dy[:, :, h2:]
    dx[:, :, :h2] += d1 * cos[None] + d2 * sin[None]
    dx[:, :, h2:] += -d1 * sin[None] + d2 * cos[None]


def adamw_update(w, g, m, v, lr, beta1, beta2, eps, wd, c1, c2):
    # in-place decoupled-weight-decay Adam step; c1/c2 are bias corrections
    b1, b2 = np.float32(beta1), np.float32(beta2)
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * np.square(g)
    mhat = m / np.float32(c1)
    vhat = v / np.float32(c2)
    w -= np.float32(lr) * (mhat / (np.sqrt(vhat) + np.float32(eps)) + np.float32(wd) * w)
