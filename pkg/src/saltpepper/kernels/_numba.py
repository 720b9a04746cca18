"""Numba-compiled implementations of the hot inner loops.

Loops are arranged so the innermost axis walks contiguous memory (axpy /
dot-product shape) and the accumulator row stays cache-resident; fastmath
permits the SIMD reductions. Contracts match ``_numpy`` up to summation
order.
"""
import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def conv2d(xp, w, b):
    cout, cin, kh, kw = w.shape
    h = xp.shape[1] - kh + 1
    wd = xp.shape[2] - kw + 1
    out = np.empty((cout, h, wd))
    row = np.empty(wd)
    for o in range(cout):
        for y in range(h):
            row[:] = b[o]
            for i in range(cin):
                for a in range(kh):
                    src = xp[i, y + a]
                    for c in range(kw):
                        wv = w[o, i, a, c]
                        for x in range(wd):
                            row[x] += wv * src[x + c]
            out[o, y] = row
    return out


@njit(cache=True, fastmath=True)
def conv2d_grad_input(gout, w):
    cout, cin, kh, kw = w.shape
    h = gout.shape[1]
    wd = gout.shape[2]
    gxp = np.zeros((cin, h + kh - 1, wd + kw - 1))
    for i in range(cin):
        for o in range(cout):
            for a in range(kh):
                for c in range(kw):
                    wv = w[o, i, a, c]
                    for y in range(h):
                        dst = gxp[i, y + a]
                        src = gout[o, y]
                        for x in range(wd):
                            dst[x + c] += wv * src[x]
    return gxp


@njit(cache=True, fastmath=True)
def conv2d_grad_weights(gout, xp, kh, kw):
    cout = gout.shape[0]
    cin = xp.shape[0]
    h = gout.shape[1]
    wd = gout.shape[2]
    gw = np.zeros((cout, cin, kh, kw))
    for o in range(cout):
        for i in range(cin):
            for y in range(h):
                src = gout[o, y]
                for a in range(kh):
                    xrow = xp[i, y + a]
                    for c in range(kw):
                        acc = 0.0
                        for x in range(wd):
                            acc += src[x] * xrow[x + c]
                        gw[o, i, a, c] += acc
    return gw


@njit(cache=True, fastmath=True)
def sepconv_rows(xp, k):
    n = k.size
    c, h, wp = xp.shape
    wd = wp - n + 1
    out = np.empty((c, h, wd))
    for ch in range(c):
        for y in range(h):
            src = xp[ch, y]
            for x in range(wd):
                acc = 0.0
                for j in range(n):
                    acc += k[j] * src[x + j]
                out[ch, y, x] = acc
    return out
