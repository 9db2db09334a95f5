"""Time the numba and numpy paths of the metric kernels against each other.

    python benchmarks/bench_kernels.py [--size 64] [--repeat 5]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from vcm3d.metrics import _kernels


def bench(fn, repeat: int) -> float:
    fn()  # warm-up (includes numba compilation)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--window", type=int, default=7)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    shape = (args.size,) * 3
    mask = rng.random(shape) < 0.3
    vol = rng.random(shape)
    cases = {
        "border_mask": lambda: _kernels.border_mask(mask),
        "box_sum3d": lambda: _kernels.box_sum3d(vol, args.window),
    }
    paths = [False, True] if _kernels.NUMBA_AVAILABLE else [False]
    print(f"{'kernel':<12} {'path':<6} {'seconds':>10}")
    for name, fn in cases.items():
        results = {}
        for use in paths:
            _kernels.USE_NUMBA = use
            results[use] = bench(fn, args.repeat)
            print(f"{name:<12} {'numba' if use else 'numpy':<6} {results[use]:>10.5f}")
        if len(results) == 2:
            print(f"{'':<12} speedup {results[False] / results[True]:>8.2f}x")
    _kernels.USE_NUMBA = _kernels.NUMBA_AVAILABLE


if __name__ == "__main__":
    main()
