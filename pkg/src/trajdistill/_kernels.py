"""Hot image kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports cleanly and the environment
variable ``TRAJDISTILL_NO_NUMBA`` is unset (or "0"). Both paths are always
importable by name so tests and ``benchmarks/bench_kernels.py`` can compare
them directly.

All kernels take a stack of 2-D planes shaped (N, H, W) in float64.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("TRAJDISTILL_NO_NUMBA", "0").lower() in ("", "0", "false", "no")


# ---------------------------------------------------------------- numpy path


def median3x3_numpy(planes):
    padded = np.pad(planes, ((0, 0), (1, 1), (1, 1)), mode="edge")
    win = sliding_window_view(padded, (3, 3), axis=(1, 2))
    n, h, w = planes.shape
    return np.median(win.reshape(n, h, w, 9), axis=-1)


def box_mean_numpy(planes, k):
    win = sliding_window_view(planes, (k, k), axis=(1, 2))
    return win.mean(axis=(-2, -1))


def conv_same_numpy(planes, filters):
    f, k, _ = filters.shape
    r = k // 2
    padded = np.pad(planes, ((0, 0), (r, r), (r, r)))
    win = sliding_window_view(padded, (k, k), axis=(1, 2))
    return np.einsum("nhwij,fij->nfhw", win, filters)


def conv_same_adjoint_numpy(grad, filters):
    # adjoint of zero-padded cross-correlation = correlation with the flipped filter
    f, k, _ = filters.shape
    r = k // 2
    flipped = filters[:, ::-1, ::-1]
    padded = np.pad(grad, ((0, 0), (0, 0), (r, r), (r, r)))
    win = sliding_window_view(padded, (k, k), axis=(2, 3))
    return np.einsum("nfhwij,fij->nhw", win, flipped)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def median3x3_numba(planes):
        n, h, w = planes.shape
        out = np.empty_like(planes)
        buf = np.empty(9)
        for p in range(n):
            for i in range(h):
                for j in range(w):
                    m = 0
                    for di in range(-1, 2):
                        ii = min(max(i + di, 0), h - 1)
                        for dj in range(-1, 2):
                            jj = min(max(j + dj, 0), w - 1)
                            buf[m] = planes[p, ii, jj]
                            m += 1
                    # insertion sort; 9 elements
                    for a in range(1, 9):
                        v = buf[a]
                        b = a - 1
                        while b >= 0 and buf[b] > v:
                            buf[b + 1] = buf[b]
                            b -= 1
                        buf[b + 1] = v
                    out[p, i, j] = buf[4]
        return out

    @njit(cache=True)
    def box_mean_numba(planes, k):
        n, h, w = planes.shape
        oh, ow = h - k + 1, w - k + 1
        out = np.empty((n, oh, ow))
        inv = 1.0 / (k * k)
        for p in range(n):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for a in range(k):
                        for b in range(k):
                            acc += planes[p, i + a, j + b]
                    out[p, i, j] = acc * inv
        return out

    @njit(cache=True)
    def conv_same_numba(planes, filters):
        n, h, w = planes.shape
        nf, k, _ = filters.shape
        r = k // 2
        out = np.zeros((n, nf, h, w))
        for p in range(n):
            for f in range(nf):
                for i in range(h):
                    for j in range(w):
                        acc = 0.0
                        for a in range(k):
                            ii = i + a - r
                            if ii < 0 or ii >= h:
                                continue
                            for b in range(k):
                                jj = j + b - r
                                if jj < 0 or jj >= w:
                                    continue
                                acc += planes[p, ii, jj] * filters[f, a, b]
                        out[p, f, i, j] = acc
        return out

    @njit(cache=True)
    def conv_same_adjoint_numba(grad, filters):
        n, nf, h, w = grad.shape
        k = filters.shape[1]
        r = k // 2
        out = np.zeros((n, h, w))
        for p in range(n):
            for f in range(nf):
                for i in range(h):
                    for j in range(w):
                        g = grad[p, f, i, j]
                        if g == 0.0:
                            continue
                        for a in range(k):
                            ii = i + a - r
                            if ii < 0 or ii >= h:
                                continue
                            for b in range(k):
                                jj = j + b - r
                                if jj < 0 or jj >= w:
                                    continue
                                out[p, ii, jj] += g * filters[f, a, b]
        return out

else:  # pragma: no cover
    median3x3_numba = median3x3_numpy
    box_mean_numba = box_mean_numpy
    conv_same_numba = conv_same_numpy
    conv_same_adjoint_numba = conv_same_adjoint_numpy


def _planes(x):
    return np.ascontiguousarray(x, dtype=np.float64)


if USE_NUMBA:

    def median3x3(planes):
        return median3x3_numba(_planes(planes))

    def box_mean(planes, k):
        return box_mean_numba(_planes(planes), int(k))

    def conv_same(planes, filters):
        return conv_same_numba(_planes(planes), _planes(filters))

    def conv_same_adjoint(grad, filters):
        return conv_same_adjoint_numba(_planes(grad), _planes(filters))

else:
    median3x3 = median3x3_numpy
    box_mean = box_mean_numpy
    conv_same = conv_same_numpy
    conv_same_adjoint = conv_same_adjoint_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
