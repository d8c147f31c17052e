"""Time the numba kernels against their pure-numpy twins.

    python benchmarks/bench_kernels.py [--batch 32] [--channels 32] [--size 16] [--repeat 5]

Every kernel is run once per backend first (this also triggers JIT
compilation) and the outputs are compared bitwise before timing.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from wsnorm import _accel


def cases(batch: int, channels: int, size: int, rng: np.random.Generator) -> dict:
    x = rng.normal(size=(batch, channels, size, size))
    w = rng.normal(size=(channels, channels, 3, 3))
    col = _accel.BACKENDS["numpy"].im2col(x, 3, 3, 1, 1)
    a = rng.normal(size=(256, channels * 9))
    return {
        "im2col": lambda k: k.im2col(x, 3, 3, 1, 1),
        "col2im": lambda k: k.col2im(col, x.shape, 3, 3, 1, 1),
        "matmul_ordered": lambda k: k.matmul_ordered(a, w.reshape(channels, -1).T),
        "conv2d_naive": lambda k: k.conv2d_naive(x[:2], w, 1, 1),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if "numba" not in _accel.BACKENDS:
        print("numba backend unavailable; nothing to compare")
        return 1
    kernels = cases(args.batch, args.channels, args.size, np.random.default_rng(0))
    print(f"batch={args.batch} channels={args.channels} size={args.size} float64, best of {args.repeat}")
    print(f"{'kernel':<16}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  bitwise")
    for name, fn in kernels.items():
        outs = {b: fn(_accel.BACKENDS[b]) for b in ("numpy", "numba")}
        same = np.array_equal(outs["numpy"], outs["numba"])
        ms = {b: 1e3 * min(timeit.repeat(lambda: fn(_accel.BACKENDS[b]), number=1, repeat=args.repeat))
              for b in ("numpy", "numba")}
        print(f"{name:<16}{ms['numpy']:>12.2f}{ms['numba']:>12.2f}{ms['numpy'] / ms['numba']:>9.1f}x  {same}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
