"""Time the numba and numpy paths of each image kernel.

    python3 benchmarks/bench_kernels.py [--repeat N]

The first numba call compiles (or loads the on-disk cache) and is excluded.
"""

import argparse
import timeit

import numpy as np

from trajdistill import _kernels as K


def cases(rng):
    planes = rng.random((48, 8, 8))  # a training batch of 8x8 patches, 3 channels
    big = rng.random((3, 256, 256))
    filters = rng.standard_normal((16, 5, 5)) / 5
    grad = rng.standard_normal((48, 16, 8, 8))
    return [
        ("median3x3 48x8x8", K.median3x3_numpy, K.median3x3_numba if K.HAVE_NUMBA else None, (planes,)),
        ("median3x3 3x256x256", K.median3x3_numpy, K.median3x3_numba if K.HAVE_NUMBA else None, (big,)),
        ("box_mean k=8 3x256x256", K.box_mean_numpy, K.box_mean_numba if K.HAVE_NUMBA else None, (big, 8)),
        ("conv_same 48x8x8 x16", K.conv_same_numpy, K.conv_same_numba if K.HAVE_NUMBA else None, (planes, filters)),
        ("conv_adjoint 48x16x8x8", K.conv_same_adjoint_numpy, K.conv_same_adjoint_numba if K.HAVE_NUMBA else None, (grad, filters)),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  max|diff|")
    for name, f_np, f_nb, a in cases(rng):
        t_np = min(timeit.repeat(lambda: f_np(*a), number=1, repeat=args.repeat)) * 1e3
        if f_nb is None:
            print(f"{name:<26}{t_np:10.3f}{'-':>10}{'-':>9}")
            continue
        f_nb(*a)  # compile / load cache
        t_nb = min(timeit.repeat(lambda: f_nb(*a), number=1, repeat=args.repeat)) * 1e3
        diff = float(np.max(np.abs(f_np(*a) - f_nb(*a))))
        print(f"{name:<26}{t_np:10.3f}{t_nb:10.3f}{t_np / t_nb:9.1f}  {diff:.1e}")


if __name__ == "__main__":
    main()
