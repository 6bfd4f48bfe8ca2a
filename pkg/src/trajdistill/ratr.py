"""Reflectance-aware trajectory refinement (RATR).

Retinex split of the low-light condition ``y = h * x + z``: illumination from
the per-pixel channel maximum, noise from the residual of a 3x3 median
filter, and a latent clean image ``(y - z) / h``. The latent clean image
shifts the teacher's noise target into a residual space and anchors the
refined trajectory.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ShapeError, SingularStepError
from .score import expand

ILLUMINATION_FLOOR = 0.05


@dataclass(frozen=True)
class RetinexDecomposition:
    illumination: np.ndarray  # (..., 1, H, W), values in [floor, 1]
    noise_map: np.ndarray  # same shape as y, >= 0
    latent_clean: np.ndarray  # same shape as y, clamped to [0, 1]


def _as_image(y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim < 2 or y.size == 0:
        raise ShapeError(f"expected a non-empty image of rank >= 2, got shape {y.shape}")
    return y[None] if y.ndim == 2 else y


def illumination_map(y, floor=ILLUMINATION_FLOOR):
    """Per-pixel channel maximum, lower-clamped to ``floor``; one channel."""
    y = _as_image(y)
    return np.maximum(y.max(axis=-3, keepdims=True), floor)


def denoise(y):
    """Per-channel 3x3 median filter with edge replication."""
    y = _as_image(y)
    h, w = y.shape[-2:]
    return _kernels.median3x3(y.reshape(-1, h, w)).reshape(y.shape)


def noise_map(y):
    y = _as_image(y)
    return np.abs(y - denoise(y))


def latent_clean(y, floor=ILLUMINATION_FLOOR):
    y = _as_image(y)
    h = illumination_map(y, floor)
    z = noise_map(y)
    x0 = np.clip((y - z) / h, 0.0, 1.0)
    return RetinexDecomposition(illumination=h, noise_map=z, latent_clean=x0)


def residual_noise(x_t, x_tilde0, t, sched):
    """Noise measured relative to ``x_tilde0``: (x_t - a_t x_tilde0) / sigma_t."""
    if np.any(np.asarray(t) < 1):
        raise SingularStepError(f"residual noise is undefined at t=0 (sigma_0 = 0), got t={t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    return (x_t - expand(sched.signal(t), x_t) * x_tilde0) / expand(sched.noise(t), x_t)


def refinement_anchor(score, x_u, y, u, s, x_tilde0, sched):
    """a_s x_tilde0 + sigma_s eps(x_u, y, u); one evaluation of ``score``."""
    x_u = np.asarray(x_u, dtype=np.float64)
    # u = 0 forces s = 0, where sigma_s = 0 and the eps term drops out
    eps_u = score(x_u, y, np.maximum(u, 1))
    return expand(sched.signal(s), x_u) * x_tilde0 + expand(sched.noise(s), x_u) * eps_u
