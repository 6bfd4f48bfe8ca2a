"""Full-reference quality metrics on a [0, 1] pixel scale.

Multichannel inputs are reduced to luminance (channel mean) first. SSIM uses
uniform 8x8 windows at stride 1 with population (1/N) moments, so values are
comparable only with this implementation.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ShapeError

PSNR_CAP = 99.0
SSIM_WINDOW = 8
C1 = 0.01**2
C2 = 0.03**2


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    mse: float


def luminance(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x.mean(axis=0)
    if x.ndim == 2:
        return x
    raise ShapeError(f"expected (H, W) or (C, H, W), got {x.shape}")


def _pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes {a.shape} and {b.shape} differ")
    return luminance(a), luminance(b)


def psnr(a, b):
    a, b = _pair(a, b)
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def ssim(a, b, window=SSIM_WINDOW):
    a, b = _pair(a, b)
    if a.shape[0] < window or a.shape[1] < window:
        raise ShapeError(f"image {a.shape} is smaller than the {window}x{window} SSIM window")
    stack = np.stack([a, b, a * a, b * b, a * b])
    mu_a, mu_b, e_aa, e_bb, e_ab = _kernels.box_mean(stack, window)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


def report(a, b):
    la, lb = _pair(a, b)
    return MetricReport(psnr=psnr(a, b), ssim=ssim(a, b), mse=float(np.mean((la - lb) ** 2)))
