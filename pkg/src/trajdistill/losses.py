"""Training objectives and their gradients w.r.t. the estimate argument.

All squared-error terms use mean reduction. Each ``*_loss`` has a matching
``*_grad`` returning dL/d(second argument); the first argument is a target
and never receives gradient.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import NumericError, ParameterError, ShapeError
from .schedule import adaptive_weight
from .score import expand


@dataclass(frozen=True)
class LossWeights:
    lambda_eps: float = 1.0
    lambda_pix: float = 1.0
    lambda_per: float = 0.1

    def __post_init__(self):
        for name in ("lambda_eps", "lambda_pix", "lambda_per"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ParameterError(name, f"must be finite and >= 0, got {v}")


def _pair(a, b, what):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def mse(a, b):
    a, b = _pair(a, b, "mse")
    return float(np.mean((a - b) ** 2))


def eps_loss(eps_true, eps_pred, w=LossWeights()):
    e, p = _pair(eps_true, eps_pred, "eps_loss")
    return w.lambda_eps * float(np.mean((e - p) ** 2))


def eps_loss_grad(eps_true, eps_pred, w=LossWeights()):
    e, p = _pair(eps_true, eps_pred, "eps_loss")
    return (2.0 * w.lambda_eps / p.size) * (p - e)


def distill_loss(x_target, x_est, t, sched):
    """adaptive_weight(t) * MSE; ``t`` may be per item along axis 0."""
    xt, xe = _pair(x_target, x_est, "distill_loss")
    lam = expand(adaptive_weight(sched, t), xe)
    return float(np.mean(lam * (xe - xt) ** 2))


def distill_loss_grad(x_target, x_est, t, sched):
    xt, xe = _pair(x_target, x_est, "distill_loss")
    lam = expand(adaptive_weight(sched, t), xe)
    return (2.0 / xe.size) * lam * (xe - xt)


def pixel_loss(x0, x_est, w=LossWeights()):
    a, b = _pair(x0, x_est, "pixel_loss")
    return w.lambda_pix * float(np.mean((a - b) ** 2))


def pixel_loss_grad(x0, x_est, w=LossWeights()):
    a, b = _pair(x0, x_est, "pixel_loss")
    return (2.0 * w.lambda_pix / b.size) * (b - a)


class FeatureBank:
    """Frozen random-filter features standing in for a pretrained network.

    Each image plane is filtered by ``n_filters`` random k x k kernels at full
    resolution and after 2x2 average pooling; features are the absolute filter
    responses. ``FeatureBank.identity()`` gives phi(x) = x.
    """

    def __init__(self, n_filters=16, size=5, scales=2, seed=0):
        rng = np.random.default_rng(seed)
        self.filters = rng.standard_normal((n_filters, size, size)) / size
        self.scales = scales

    @classmethod
    def identity(cls):
        bank = cls.__new__(cls)
        bank.filters = None
        bank.scales = 1
        return bank

    def _pyramid(self, planes):
        out = [planes]
        for _ in range(1, self.scales):
            p = out[-1]
            h, w = (p.shape[1] // 2) * 2, (p.shape[2] // 2) * 2
            if h == 0 or w == 0:
                break
            p = p[:, :h, :w]
            out.append(0.25 * (p[:, 0::2, 0::2] + p[:, 1::2, 0::2] + p[:, 0::2, 1::2] + p[:, 1::2, 1::2]))
        return out

    def features(self, x):
        """Concatenated flat feature vector for ``x`` (any shape ending in H, W)."""
        x = np.asarray(x, dtype=np.float64)
        if self.filters is None:
            return x.ravel()
        planes = x.reshape(-1, *x.shape[-2:])
        return np.concatenate([np.abs(_kernels.conv_same(p, self.filters)).ravel() for p in self._pyramid(planes)])

    def vjp(self, x, g):
        """Pull a gradient on ``features(x)`` back to ``x``."""
        x = np.asarray(x, dtype=np.float64)
        if self.filters is None:
            return np.asarray(g, dtype=np.float64).reshape(x.shape)
        planes = x.reshape(-1, *x.shape[-2:])
        pyr = self._pyramid(planes)
        off = 0
        grads = []
        for p in pyr:
            resp = _kernels.conv_same(p, self.filters)
            n = resp.size
            gp = np.sign(resp) * g[off : off + n].reshape(resp.shape)
            off += n
            grads.append(_kernels.conv_same_adjoint(gp, self.filters))
        # unwind the pooling chain from coarsest to finest
        acc = grads[-1]
        for level in range(len(pyr) - 2, -1, -1):
            fine = np.zeros_like(pyr[level])
            h, w = acc.shape[1] * 2, acc.shape[2] * 2
            for di in (0, 1):
                for dj in (0, 1):
                    fine[:, di:h:2, dj:w:2] += 0.25 * acc
            acc = grads[level] + fine
        return acc.reshape(x.shape)


def perceptual_loss(x0, x_est, bank: FeatureBank, w=LossWeights()):
    a, b = _pair(x0, x_est, "perceptual_loss")
    fa, fb = bank.features(a), bank.features(b)
    return w.lambda_per * float(np.mean((fa - fb) ** 2))


def perceptual_loss_grad(x0, x_est, bank: FeatureBank, w=LossWeights()):
    a, b = _pair(x0, x_est, "perceptual_loss")
    fa, fb = bank.features(a), bank.features(b)
    return bank.vjp(b, (2.0 * w.lambda_per / fb.size) * (fb - fa))


def total_loss(parts):
    """Sum of loss terms; ``parts`` is a mapping name -> value or a sequence."""
    items = parts.items() if hasattr(parts, "items") else enumerate(parts)
    total = 0.0
    for name, value in items:
        value = float(value)
        if not math.isfinite(value):
            raise NumericError(name, value)
        total += value
    return total
