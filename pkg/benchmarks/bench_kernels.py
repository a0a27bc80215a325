"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the median time of each backend, the
speed-up, and the largest absolute difference between their outputs.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from hybridasr import kernels


def _median_time(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def _max_diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def cases(rng):
    T, C, U = 12, 33, 6
    logits = rng.normal(size=(T, C))
    lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    target = rng.integers(4, C - 1, size=U)
    yield "ctc (T=12, |V|=32)", lambda k: k.ctc_forward_backward(lp, target, C - 1)

    T, U = 200, 60
    logits = rng.normal(size=(T, C))
    lp2 = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    target2 = rng.integers(4, C - 1, size=U)
    yield "ctc (T=200, U=60)", lambda k: k.ctc_forward_backward(lp2, target2, C - 1)

    B, N, D, K = 8, 12, 64, 15
    x = rng.normal(size=(B, N, D))
    w = rng.normal(size=(D, K))
    valid = (rng.random((K, B, N)) > 0.2).astype(np.float64)
    g = rng.normal(size=(B, N, D))
    yield "depthwise fwd (8x12x64, K=15)", lambda k: k.depthwise_forward(x, w, valid, K // 2)
    yield "depthwise bwd (8x12x64, K=15)", lambda k: k.depthwise_backward(g, x, w, valid, K // 2)

    a = rng.integers(0, 30, size=200)
    b = rng.integers(0, 30, size=190)
    yield "edit distance (200 vs 190)", lambda k: k.edit_distance(a, b)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)
    if kernels.compiled is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<32}{'cython':>12}{'numpy':>12}{'speed-up':>10}{'max diff':>12}")
    for name, run in cases(rng):
        fast = _median_time(lambda: run(kernels.compiled), args.repeat)
        slow = _median_time(lambda: run(kernels.python), args.repeat)
        diff = _max_diff(run(kernels.compiled), run(kernels.python))
        print(f"{name:<32}{fast * 1e6:>10.1f}us{slow * 1e6:>10.1f}us{slow / fast:>9.1f}x{diff:>12.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
