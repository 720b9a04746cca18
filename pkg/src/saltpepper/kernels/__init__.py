"""Backend dispatch for the hot numeric kernels.

Two interchangeable implementations exist: ``_numba`` (JIT-compiled, default)
and ``_numpy`` (vectorized fallback). Selection happens once at import time
via the ``SALTPEPPER_BACKEND`` environment variable:

    SALTPEPPER_BACKEND=numba   require numba (ImportError if missing)
    SALTPEPPER_BACKEND=numpy   force the pure-numpy path
    unset / auto               numba when importable, numpy otherwise

``benchmarks/bench_kernels.py`` times the two side by side.
"""
import os

import numpy as np

_requested = os.environ.get("SALTPEPPER_BACKEND", "auto").lower()

if _requested == "numpy":
    from . import _numpy as _impl

    BACKEND = "numpy"
elif _requested in ("auto", "numba"):
    try:
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        from . import _numpy as _impl

        BACKEND = "numpy"
else:
    raise ValueError(
        f"SALTPEPPER_BACKEND={_requested!r} not recognised; "
        "use 'numba', 'numpy' or 'auto'")

conv2d = _impl.conv2d
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weights = _impl.conv2d_grad_weights
sepconv_rows = _impl.sepconv_rows


def pad_edge(x, py, px):
    """Edge-replicate padding of a (c, H, W) array."""
    return np.pad(x, ((0, 0), (py, py), (px, px)), mode="edge")


def fold_edge_adjoint(gxp, py, px):
    """Adjoint of ``pad_edge``: folds padded-border gradients onto edge pixels.

    Each padded position maps to its clamped source pixel, so the border
    bands accumulate into the first/last row and column. Folding per axis is
    exact because the clamping is separable.
    """
    g = gxp
    if py:
        top = g[:, :py, :].sum(axis=1)
        bottom = g[:, -py:, :].sum(axis=1)
        g = g[:, py:g.shape[1] - py, :].copy()
        g[:, 0, :] += top
        g[:, -1, :] += bottom
    if px:
        left = g[:, :, :px].sum(axis=2)
        right = g[:, :, -px:].sum(axis=2)
        g2 = g[:, :, px:g.shape[2] - px].copy()
        g2[:, :, 0] += left
        g2[:, :, -1] += right
        g = g2
    if not (py or px):
        g = g.copy()
    return g
