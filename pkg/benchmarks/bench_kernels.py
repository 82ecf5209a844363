"""Compare the compiled and numpy im2col/col2im kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from cadvae import _kernels_py

try:
    from cadvae import _ckernels
except ImportError:
    _ckernels = None

# (batch, channels, height, width, kernel, stride, pad): encoder/decoder layer shapes
CASES = [
    (64, 3, 16, 16, 3, 2, 1),
    (64, 16, 8, 8, 3, 2, 1),
    (64, 32, 8, 8, 4, 2, 1),
    (64, 16, 16, 16, 4, 2, 1),
]


def bench(impl, case, repeat):
    n, c, h, w, k, s, p = case
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, c, h, w))
    cols = impl.im2col(x, k, k, s, p)
    t_fwd = min(timeit.repeat(lambda: impl.im2col(x, k, k, s, p), number=10, repeat=repeat)) / 10
    t_bwd = min(timeit.repeat(lambda: impl.col2im(cols, x.shape, k, k, s, p), number=10, repeat=repeat)) / 10
    return t_fwd, t_bwd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = [("python", _kernels_py)] + ([("cython", _ckernels)] if _ckernels else [])
    if _ckernels is None:
        print("compiled extension not built; timing the numpy kernels only")
    print(f"{'case':<28}{'backend':<9}{'im2col ms':>11}{'col2im ms':>11}")
    for case in CASES:
        base = None
        for name, impl in impls:
            f, b = bench(impl, case, args.repeat)
            note = ""
            if base is None:
                base = (f, b)
            else:
                note = f"  ({base[0] / f:.1f}x, {base[1] / b:.1f}x)"
            print(f"{str(case):<28}{name:<9}{f * 1e3:>11.3f}{b * 1e3:>11.3f}{note}")


if __name__ == "__main__":
    main()
