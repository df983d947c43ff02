"""Time the compiled kernels against the pure-Python fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on identical inputs through both backends; the script checks
that the outputs agree before reporting the timings.
"""

import argparse
import math
import timeit

import numpy as np

from mff import kernels


def overlap_inputs(rng, n):
    def boxes():
        return np.column_stack(
            [rng.uniform(-20, 20, n), rng.uniform(-20, 20, n), rng.uniform(0.5, 5, n), rng.uniform(0.5, 3, n), rng.uniform(-math.pi, math.pi, n)]
        )

    return boxes(), boxes()


def zbuffer_inputs(rng, n, h=1080, w=1920):
    return rng.integers(0, h, n), rng.integers(0, w, n), rng.uniform(0.5, 250, n), h, w


def scatter_inputs(rng, n, nx=192, ny=192):
    return rng.integers(0, nx, n), rng.integers(0, ny, n), rng.uniform(-2, 5, n), nx, ny


CASES = [
    ("bev_overlap_matrix 200x200", "bev_overlap_matrix", lambda rng: overlap_inputs(rng, 200)),
    ("zbuffer_min 2e6 points", "zbuffer_min", lambda rng: zbuffer_inputs(rng, 2_000_000)),
    ("bev_scatter 1e6 points", "bev_scatter", lambda rng: scatter_inputs(rng, 1_000_000)),
]


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, atol=1e-9, equal_nan=True)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if kernels.compiled_backend is None:
        print("compiled kernels are not available; only the Python fallback can be timed")
    backends = [("python", kernels.python_backend)]
    if kernels.compiled_backend is not None:
        backends.append(("cython", kernels.compiled_backend))

    print(f"{'kernel':<30}" + "".join(f"{name:>12}" for name, _ in backends) + f"{'speedup':>10}")
    for label, fn_name, make in CASES:
        inputs = make(np.random.default_rng(0))
        outs, times = [], []
        for _, mod in backends:
            fn = getattr(mod, fn_name)
            outs.append(fn(*inputs))
            times.append(min(timeit.repeat(lambda: fn(*inputs), number=1, repeat=args.repeat)))
        if len(outs) == 2 and not _same(outs[0], outs[1]):
            raise SystemExit(f"{label}: backends disagree")
        speed = f"{times[0] / times[1]:>9.1f}x" if len(times) == 2 else f"{'-':>10}"
        print(f"{label:<30}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times) + speed)


if __name__ == "__main__":
    main()
