"""Times the numba and numpy kernel backends side by side.

Imports both implementation modules directly, so the SALTPEPPER_BACKEND
environment variable plays no role here. Numba results exclude compilation:
every kernel is called once for warmup before timing starts. Sizes mirror the
desk-scale training workload (64x64 canvas, 3x3 filter banks, 13-tap blur
taps); honest numbers, whichever way they fall.

Run:  python3 benchmarks/bench_kernels.py [--repeats N]
"""
import argparse
import time

import numpy as np

from saltpepper.kernels import _numpy, pad_edge

try:
    from saltpepper.kernels import _numba
except ImportError:
    _numba = None


def make_cases(rng):
    """(name, kernel name, args) tuples spanning the training hot path."""
    cases = []
    for cin, cout, h, w in ((5, 8, 64, 64), (16, 32, 32, 32)):
        x = rng.standard_normal((cin, h, w))
        xp = pad_edge(x, 1, 1)
        wts = rng.standard_normal((cout, cin, 3, 3))
        b = rng.standard_normal(cout)
        gout = rng.standard_normal((cout, h, w))
        label = f"{cin}->{cout} @ {h}x{w}"
        cases.append((f"conv2d        {label}", "conv2d", (xp, wts, b)))
        cases.append((f"grad_input    {label}", "conv2d_grad_input", (gout, wts)))
        cases.append((f"grad_weights  {label}", "conv2d_grad_weights", (gout, xp, 3, 3)))
    taps = rng.standard_normal(13)
    taps /= taps.sum()
    rows = pad_edge(rng.standard_normal((4, 64, 64)), 0, 6)
    cases.append(("sepconv_rows  4ch @ 64x64, 13 taps", "sepconv_rows", (rows, taps)))
    return cases


def best_of(fn, args, repeats, inner):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        for _ in range(inner):
            fn(*args)
        best = min(best, (time.perf_counter() - start) / inner)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7, help="timing repeats per case")
    ap.add_argument("--inner", type=int, default=20, help="calls per repeat")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    cases = make_cases(rng)

    if _numba is None:
        print("numba not importable; timing the numpy backend only")
    else:
        for _, kernel, call_args in cases:
            getattr(_numba, kernel)(*call_args)  # trigger compilation

        # parity spot check before trusting the timings
        for name, kernel, call_args in cases:
            a = getattr(_numpy, kernel)(*call_args)
            b = getattr(_numba, kernel)(*call_args)
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12, err_msg=name)

    header = f"{'case':38s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for name, kernel, call_args in cases:
        t_np = best_of(getattr(_numpy, kernel), call_args, args.repeats, args.inner)
        if _numba is None:
            print(f"{name:38s} {t_np * 1e6:8.1f} us {'-':>10s} {'-':>8s}")
            continue
        t_nb = best_of(getattr(_numba, kernel), call_args, args.repeats, args.inner)
        print(f"{name:38s} {t_np * 1e6:8.1f} us {t_nb * 1e6:8.1f} us {t_np / t_nb:7.2f}x")


if __name__ == "__main__":
    main()
