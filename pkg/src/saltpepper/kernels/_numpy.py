"""Pure-numpy implementations of the hot inner loops.

Same contracts as ``_numba``: all convolutions are *valid* correlations over
inputs the caller has already padded, float64, C-contiguous.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d(xp, w, b):
    """Valid correlation of a padded image stack with a filter bank.

    xp: (c_in, H + kh - 1, W + kw - 1), w: (c_out, c_in, kh, kw), b: (c_out,)
    returns (c_out, H, W).
    """
    win = sliding_window_view(xp, (w.shape[2], w.shape[3]), axis=(1, 2))
    out = np.tensordot(w, win, axes=[(1, 2, 3), (0, 3, 4)])
    return out + b[:, None, None]


def conv2d_grad_input(gout, w):
    """Adjoint of conv2d with respect to the padded input."""
    cout, cin, kh, kw = w.shape
    _, h, wd = gout.shape
    gxp = np.zeros((cin, h + kh - 1, wd + kw - 1))
    for a in range(kh):
        for c in range(kw):
            gxp[:, a:a + h, c:c + wd] += np.tensordot(
                w[:, :, a, c], gout, axes=[(0,), (0,)])
    return gxp


def conv2d_grad_weights(gout, xp, kh, kw):
    """Adjoint of conv2d with respect to the filter bank."""
    _, h, wd = gout.shape
    cin = xp.shape[0]
    gw = np.empty((gout.shape[0], cin, kh, kw))
    for a in range(kh):
        for c in range(kw):
            gw[:, :, a, c] = np.tensordot(
                gout, xp[:, a:a + h, c:c + wd], axes=[(1, 2), (1, 2)])
    return gw


def sepconv_rows(xp, k):
    """1-D valid correlation along the last axis of a (c, H, W + K - 1) array."""
    win = sliding_window_view(xp, k.size, axis=-1)
    return win @ k
