"""Timing of the compiled kernels against the numpy fallback.

Run with ``python benchmarks/bench_kernels.py``. Each kernel is checked for
agreement before it is timed.
"""

import argparse
import timeit

import numpy as np

from bsipde.kernels import _pykernels

try:
    from bsipde.kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(scale: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    rows, m = 64 * scale, 257
    u = rng.standard_normal((rows, m))
    c2, c1 = rng.random((rows, m)), rng.standard_normal((rows, m))
    yield "fd_advance", (u, 1.0 / 256, c2, c1)

    vals = rng.standard_normal((rows, m))
    pts = rng.uniform(0.0, 1.0, (rows, 64))
    yield "uniform_interp", (vals, 0.0, 1.0 / (m - 1), pts)

    xp = np.cumsum(rng.random((rows, m)) + 1e-3, axis=1)
    xp /= xp[:, -1:]
    yield "interp_rows", (xp, vals, pts)

    P, K, n = 16 * scale, 256, 3
    c0 = rng.standard_normal((P, n))
    A = 0.1 * rng.standard_normal((n, n))
    B = 0.1 * rng.standard_normal((1, n, n))
    J = 0.1 * rng.standard_normal((2, n, n))
    dt = np.full((P, K), 1.0 / K)
    dW = np.sqrt(1.0 / K) * rng.standard_normal((P, K, 1))
    marks = np.where(rng.random((P, K)) < 0.02, rng.integers(0, 2, (P, K)), -1).astype(np.int64)
    yield "linear_sde_paths", (c0, A, B, J, dt, dW, marks)


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return bool(np.allclose(a, b, rtol=1e-12, atol=1e-12))


def best_of(fn, args, repeat: int) -> float:
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scale", type=int, default=4, help="problem size multiplier")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels are not built; only the fallback is available")
        return 1
    print(f"{'kernel':<18}{'python [ms]':>13}{'cython [ms]':>13}{'speedup':>10}")
    for name, a in cases(args.scale):
        py, cy = getattr(_pykernels, name), getattr(_ckernels, name)
        if not _same(py(*a), cy(*a)):
            print(f"{name}: backends disagree")
            return 1
        tp, tc = best_of(py, a, args.repeat), best_of(cy, a, args.repeat)
        print(f"{name:<18}{1e3 * tp:>13.3f}{1e3 * tc:>13.3f}{tp / tc:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
