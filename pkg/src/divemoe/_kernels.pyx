# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused C implementations of the hot kernels.

Same contract as `_kernels_py`: forward kernels allocate and return, backward
kernels accumulate into caller buffers. Row reductions accumulate in double
and store float32, so results agree with the numpy lane to float32 tolerance
rather than bit-for-bit.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport expf, logf, sqrtf, exp, log, sqrt

cnp.import_array()

BACKEND = "cython"


def swish_fwd(cnp.float32_t[::1] x not None):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n, dtype=np.float32)
    cdef cnp.float32_t[::1] y = out
    cdef float s
    for i in range(n):
        s = 1.0 / (1.0 + expf(-x[i]))
        y[i] = x[i] * s
    return out


def swish_bwd(cnp.float32_t[::1] x not None, cnp.float32_t[::1] dy not None,
              cnp.float32_t[::1] dx not None):
    cdef Py_ssize_t n = x.shape[0], i
    cdef float s
    for i in range(n):
        s = 1.0 / (1.0 + expf(-x[i]))
        dx[i] += dy[i] * (s + x[i] * s * (1.0 - s))


def rmsnorm_fwd(cnp.float32_t[:, ::1] x not None, cnp.float32_t[::1] g not None,
                double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d), dtype=np.float32)
    inv_out = np.empty(n, dtype=np.float32)
    cdef cnp.float32_t[:, ::1] y = out
    cdef cnp.float32_t[::1] inv = inv_out
    cdef double acc
    cdef float r
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += <double>x[i, j] * x[i, j]
        r = <float>(1.0 / sqrt(acc / d + eps))
        inv[i] = r
        for j in range(d):
            y[i, j] = x[i, j] * r * g[j]
    return out, inv_out


def rmsnorm_bwd(cnp.float32_t[:, ::1] x not None, cnp.float32_t[::1] g not None,
                cnp.float32_t[::1] inv not None, cnp.float32_t[:, ::1] dy not None,
                cnp.float32_t[:, ::1] dx not None, cnp.float32_t[::1] dg not None):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double dot
    cdef float r, coef
    for i in range(n):
        r = inv[i]
        dot = 0.0
        for j in range(d):
            dot += <double>dy[i, j] * g[j] * x[i, j]
        coef = <float>(dot * r * r * r / d)
        for j in range(d):
            dx[i, j] += dy[i, j] * g[j] * r - x[i, j] * coef
            dg[j] += dy[i, j] * x[i, j] * r


def softmax_temp_fwd(cnp.float32_t[:, ::1] z not None, double t):
    cdef Py_ssize_t n = z.shape[0], m = z.shape[1], i, j
    out = np.empty((n, m), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] y = out
    cdef float zmax, val
    cdef double s
    cdef float ft = <float>t
    for i in range(n):
        zmax = z[i, 0] / ft
        for j in range(1, m):
            val = z[i, j] / ft
            if val > zmax:
                zmax = val
        s = 0.0
        for j in range(m):
            val = expf(z[i, j] / ft - zmax)
            y[i, j] = val
            s += val
        for j in range(m):
            y[i, j] = <float>(y[i, j] / s)
    return out


def softmax_temp_bwd(cnp.float32_t[:, ::1] y not None, cnp.float32_t[:, ::1] dy not None,
                     double t, cnp.float32_t[:, ::1] dz not None):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    cdef double s
    cdef float ft = <float>t
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += <double>dy[i, j] * y[i, j]
        for j in range(m):
            dz[i, j] += y[i, j] * (dy[i, j] - <float>s) / ft
    return None


def causal_softmax_fwd(cnp.float32_t[:, :, ::1] z not None):
    cdef Py_ssize_t r = z.shape[0], t = z.shape[1], b, i, j
    out = np.zeros((r, t, t), dtype=np.float32)
    cdef cnp.float32_t[:, :, ::1] y = out
    cdef float zmax, val
    cdef double s
    for b in range(r):
        for i in range(t):
            zmax = z[b, i, 0]
            for j in range(1, i + 1):
                if z[b, i, j] > zmax:
                    zmax = z[b, i, j]
            s = 0.0
            for j in range(i + 1):
                val = expf(z[b, i, j] - zmax)
                y[b, i, j] = val
                s += val
            for j in range(i + 1):
                y[b, i, j] = <float>(y[b, i, j] / s)
    return out


def causal_softmax_bwd(cnp.float32_t[:, :, ::1] y not None,
                       cnp.float32_t[:, :, ::1] dy not None,
                       cnp.float32_t[:, :, ::1] dz not None):
    cdef Py_ssize_t r = y.shape[0], t = y.shape[1], b, i, j
    cdef double s
    for b in range(r):
        for i in range(t):
            s = 0.0
            for j in range(i + 1):
                s += <double>dy[b, i, j] * y[b, i, j]
            for j in range(i + 1):
                dz[b, i, j] += y[b, i, j] * (dy[b, i, j] - <float>s)


def masked_softmax_fwd(cnp.float32_t[:, ::1] z not None, cnp.uint8_t[:, ::1] mask not None,
                       double t):
    cdef Py_ssize_t n = z.shape[0], m = z.shape[1], i, j
    out = np.zeros((n, m), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] y = out
    cdef float zmax, val
    cdef double s
    cdef bint seen
    cdef float ft = <float>t
    for i in range(n):
        zmax = 0.0
        seen = False
        for j in range(m):
            if mask[i, j]:
                val = z[i, j] / ft
                if not seen or val > zmax:
                    zmax = val
                    seen = True
        s = 0.0
        for j in range(m):
            if mask[i, j]:
                val = expf(z[i, j] / ft - zmax)
                y[i, j] = val
                s += val
        for j in range(m):
            if mask[i, j]:
                y[i, j] = <float>(y[i, j] / s)
    return out


def masked_softmax_bwd(cnp.float32_t[:, ::1] y not None, cnp.uint8_t[:, ::1] mask not None,
                       cnp.float32_t[:, ::1] dy not None, double t,
                       cnp.float32_t[:, ::1] dz not None):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    cdef double s
    cdef float ft = <float>t
    for i in range(n):
        s = 0.0
        for j in range(m):
            if mask[i, j]:
                s += <double>dy[i, j] * y[i, j]
        for j in range(m):
            if mask[i, j]:
                dz[i, j] += y[i, j] * (dy[i, j] - <float>s) / ft


def cross_entropy_fwd(cnp.float32_t[:, ::1] logits not None, cnp.int64_t[::1] targets not None):
    cdef Py_ssize_t n = logits.shape[0], v = logits.shape[1], i, j
    probs_out = np.empty((n, v), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] probs = probs_out
    cdef float zmax, val
    cdef double s, total = 0.0
    for i in range(n):
        zmax = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > zmax:
                zmax = logits[i, j]
        s = 0.0
        for j in range(v):
            val = expf(logits[i, j] - zmax)
            probs[i, j] = val
            s += val
        for j in range(v):
            probs[i, j] = <float>(probs[i, j] / s)
        total += (<double>zmax + log(s)) - <double>logits[i, targets[i]]
    return probs_out, total


def cross_entropy_bwd(cnp.float32_t[:, ::1] probs not None, cnp.int64_t[::1] targets not None,
                      double scale, cnp.float32_t[:, ::1] dlogits not None):
    cdef Py_ssize_t n = probs.shape[0], v = probs.shape[1], i, j
    cdef float fs = <float>scale
    for i in range(n):
        for j in range(v):
            dlogits[i, j] += probs[i, j] * fs
        dlogits[i, targets[i]] -= fs


def rope_fwd(cnp.float32_t[:, :, ::1] x not None, cnp.float32_t[:, ::1] cos not None,
             cnp.float32_t[:, ::1] sin not None):
    cdef Py_ssize_t r = x.shape[0], t = x.shape[1], h = x.shape[2], h2 = h // 2, b, i, j
    out = np.empty((r, t, h), dtype=np.float32)
    cdef cnp.float32_t[:, :, ::1] y = out
    cdef float c, s
    for b in range(r):
        for i in range(t):
            for j in range(h2):
                c = cos[i, j]
                s = sin[i, j]
                y[b, i, j] = x[b, i, j] * c - x[b, i, j + h2] * s
                y[b, i, j + h2] = x[b, i, j] * s + x[b, i, j + h2] * c
    return out


def rope_bwd(cnp.float32_t[:, :, ::1] dy not None, cnp.float32_t[:, ::1] cos not None,
             cnp.float32_t[:, ::1] sin not None, cnp.float32_t[:, :, ::1] dx not None):
    cdef Py_ssize_t r = dy.shape[0], t = dy.shape[1], h = dy.shape[2], h2 = h // 2, b, i, j
    cdef float c, s
    for b in range(r):
        for i in range(t):
            for j in range(h2):
                c = cos[i, j]
                s = sin[i, j]
                dx[b, i, j] += dy[b, i, j] * c + dy[b, i, j + h2] * s
                dx[b, i, j + h2] += -dy[b, i, j] * s + dy[b, i, j + h2] * c


def adamw_update(cnp.float32_t[::1] w not None, cnp.float32_t[::1] g not None,
                 cnp.float32_t[::1] m not None, cnp.float32_t[::1] v not None,
                 double lr, double beta1, double beta2, double eps, double wd,
                 double c1, double c2):
    cdef Py_ssize_t n = w.shape[0], i
    cdef float b1 = <float>beta1, b2 = <float>beta2
    cdef float flr = <float>lr, feps = <float>eps, fwd = <float>wd
    cdef float fc1 = <float>c1, fc2 = <float>c2
    cdef float mhat, vhat
    for i in range(n):
        m[i] = b1 * m[i] + (1.0 - b1) * g[i]
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        mhat = m[i] / fc1
        vhat = v[i] / fc2
        w[i] -= flr * (mhat / (sqrtf(vhat) + feps) + fwd * w[i])
