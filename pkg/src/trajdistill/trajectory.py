"""Trajectory algebra: forward process, one-jump decoder, second-order
teacher trajectory, refinement, clean-image extraction and samplers.

Nothing here clamps values; the only clamp is at sampler exit.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePairError, OrderingError, ParameterError, ShapeError
from .schedule import NoiseSchedule
from .score import expand

EXTRACT_EPS = 1e-9


@dataclass(frozen=True)
class TimeTriple:
    """Steps ``s <= u < t`` of a second-order jump (scalars or per-item arrays)."""

    t: object
    u: object
    s: object

    def __post_init__(self):
        t, u, s = (np.asarray(v) for v in (self.t, self.u, self.s))
        if not (np.all(s >= 0) and np.all(s <= u) and np.all(u < t)):
            raise OrderingError(f"need 0 <= s <= u < t, got t={self.t}, u={self.u}, s={self.s}")

    @classmethod
    def midpoint(cls, t, s):
        """Default intermediate step u = floor((s + t) / 2)."""
        return cls(t, (np.asarray(t) + np.asarray(s)) // 2, s)


def _same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def forward_diffuse(x0, t, eps, sched: NoiseSchedule):
    _same_shape(x0, eps, "forward_diffuse")
    x0 = np.asarray(x0, dtype=np.float64)
    return expand(sched.signal(t), x0) * x0 + expand(sched.noise(t), x0) * np.asarray(eps)


def preliminary_variance(sched: NoiseSchedule, t):
    """The ancestral variance 1 - alpha_bar_t^2 as literally written for the
    DDPM-style reverse step. Exposed for inspection only; the samplers use
    the variance-preserving posterior variance."""
    return 1.0 - sched.cumulative(t) ** 2


def decode_with_eps(x_t, eps, t, s, sched):
    """Deterministic jump t -> s given a noise prediction at (x_t, t)."""
    a_t, a_s = expand(sched.signal(t), x_t), expand(sched.signal(s), x_t)
    s_t, s_s = expand(sched.noise(t), x_t), expand(sched.noise(s), x_t)
    r = a_s / a_t
    return r * x_t + (s_s - r * s_t) * eps


def _check_order(t, s, allow_equal):
    t, s = np.asarray(t), np.asarray(s)
    bad = np.any(s > t) if allow_equal else np.any(s >= t)
    if bad or np.any(s < 0):
        raise OrderingError(f"decoder needs 0 <= s < t, got t={t}, s={s}")


def decode(score, x_t, y, t, s, sched, allow_equal=False):
    """One trajectory-decoder jump from step ``t`` to ``s``.

    ``allow_equal`` admits the zero-length jump s == t, which returns ``x_t``.
    """
    _check_order(t, s, allow_equal)
    x_t = np.asarray(x_t, dtype=np.float64)
    if allow_equal and np.any(np.asarray(t) == 0):
        # only zero-length jumps reach t = 0; their eps coefficient is exactly 0
        if np.all(np.asarray(t) == 0):
            return x_t.copy()
        t_eval = np.maximum(t, 1)
        return decode_with_eps(x_t, score(x_t, y, t_eval), t, s, sched)
    return decode_with_eps(x_t, score(x_t, y, t), t, s, sched)


def second_order_with_intermediate(score, x_t, y, triple: TimeTriple, sched):
    """Return (x_second, x_u) using two evaluations of ``score``."""
    x_u = decode(score, x_t, y, triple.t, triple.u, sched)
    x_second = decode(score, x_u, y, triple.u, triple.s, sched, allow_equal=True)
    return x_second, x_u


def teacher_second_order(score, x_t, y, triple: TimeTriple, sched):
    """Two chained decoder jumps t -> u -> s."""
    return second_order_with_intermediate(score, x_t, y, triple, sched)[0]


def refine(x_second, x_anchor, omega):
    """omega * x_second + (1 - omega) * x_anchor, omega in (0, 1]."""
    if not 0.0 < omega <= 1.0:
        raise ParameterError("omega", f"must lie in (0, 1], got {omega}")
    _same_shape(x_second, x_anchor, "refine")
    return omega * np.asarray(x_second) + (1.0 - omega) * np.asarray(x_anchor)


def refined_direct(score, x_t, y, triple: TimeTriple, eps_tilde, omega, sched):
    """Four-term refined teacher trajectory evaluated term by term.

    Used to cross-check :func:`refine` fed with the reflectance anchor.
    """
    if not 0.0 < omega <= 1.0:
        raise ParameterError("omega", f"must lie in (0, 1], got {omega}")
    x_t = np.asarray(x_t, dtype=np.float64)
    t, u, s = triple.t, triple.u, triple.s
    a_t, a_u, a_s = (expand(sched.signal(k), x_t) for k in (t, u, s))
    s_t, s_u, s_s = (expand(sched.noise(k), x_t) for k in (t, u, s))
    eps_t = score(x_t, y, t)
    x_u = decode_with_eps(x_t, eps_t, t, u, sched)
    eps_u = score(x_u, y, u)
    return (
        (a_s / a_t) * x_t
        + s_s * eps_u
        + omega * (a_s / a_u) * s_u * (eps_t - eps_u)
        - (a_s / a_t) * s_t * (omega * eps_t + (1.0 - omega) * np.asarray(eps_tilde))
    )


def extraction_denominator(t, s, sched):
    return sched.signal(s) - (sched.noise(s) / sched.noise(t)) * sched.signal(t)


def extract_clean(x_traj, x_t, t, s, sched):
    """Clean image implied by a t -> s transition that landed on ``x_traj``."""
    _same_shape(x_traj, x_t, "extract_clean")
    if np.any(np.asarray(t) < 1):
        raise OrderingError(f"extraction needs t >= 1, got {t}")
    denom = extraction_denominator(t, s, sched)
    if np.any(np.abs(denom) <= EXTRACT_EPS):
        i = int(np.argmin(np.abs(np.atleast_1d(denom))))
        raise DegeneratePairError(np.atleast_1d(t)[i], np.atleast_1d(s)[i], np.atleast_1d(denom)[i])
    x_t = np.asarray(x_t, dtype=np.float64)
    ratio = expand(sched.noise(s) / sched.noise(t), x_t)
    return (np.asarray(x_traj) - ratio * x_t) / expand(denom, x_t)


def uniform_grid(T, K):
    """K+1 integer nodes from T down to 0, uniformly spaced."""
    if not 1 <= K <= T:
        raise ParameterError("K", f"must lie in [1, {T}], got {K}")
    return np.round(np.linspace(T, 0, K + 1)).astype(np.int64)


def _ancestral_jump(x_t, eps, t, s, z, sched):
    # DDPM posterior generalised to a t -> s jump (DDIM with eta = 1)
    a_t, a_s = sched.signal(t), sched.signal(s)
    s_t, s_s = sched.noise(t), sched.noise(s)
    x0_hat = (x_t - s_t * eps) / a_t
    if s == 0:
        return x0_hat
    c2 = (s_s**2 / s_t**2) * (1.0 - sched.cumulative(t) / sched.cumulative(s))
    return a_s * x0_hat + np.sqrt(max(s_s**2 - c2, 0.0)) * eps + np.sqrt(c2) * z


def sample(score, y, K, sched, mode="deterministic", seed=0, grid=None, shape=None, trace_dir=None):
    """K-step sampling from unit Gaussian noise at step T down to step 0.

    ``y`` is one condition (C, H, W) or a batch (B, C, H, W). Item ``i`` draws
    its noise from the stream ``(seed, i)``, so a batch reproduces item-wise
    calls. Output is clamped to [0, 1].
    """
    if mode not in ("deterministic", "ancestral"):
        raise ParameterError("mode", f"unknown sampling mode {mode!r}")
    y = np.asarray(y, dtype=np.float64)
    grid = uniform_grid(sched.T, K) if grid is None else np.asarray(grid, dtype=np.int64)
    if grid[0] > sched.T or grid[-1] != 0 or np.any(np.diff(grid) >= 0):
        raise ParameterError("grid", "must strictly decrease and end at 0")
    batched = y.ndim == 4
    items = y.shape[0] if batched else 1
    item_shape = tuple(shape) if shape is not None else (y.shape[1:] if batched else y.shape)
    rngs = [np.random.default_rng([seed, i]) for i in range(items)]
    x = np.stack([r.standard_normal(item_shape) for r in rngs])
    if not batched:
        x = x[0]
    if trace_dir is not None:
        os.makedirs(trace_dir, exist_ok=True)
        _trace(trace_dir, 0, x)
    for k, (t, s) in enumerate(zip(grid[:-1], grid[1:]), start=1):
        t, s = int(t), int(s)
        if mode == "deterministic":
            x = decode(score, x, y, t, s, sched)
        else:
            eps = score(x, y, t)
            z = np.stack([r.standard_normal(item_shape) for r in rngs])
            x = _ancestral_jump(x, eps, t, s, z if batched else z[0], sched)
        if trace_dir is not None:
            _trace(trace_dir, k, x)
    return np.clip(x, 0.0, 1.0)


def _trace(directory, k, x):
    from .imageio import image_suffix, write_image

    if x.ndim == 4:
        for i, item in enumerate(x):
            name = f"step_{k:03d}_{i:03d}{image_suffix(item)}"
            write_image(np.clip(item, 0, 1), os.path.join(directory, name))
    else:
        write_image(np.clip(x, 0, 1), os.path.join(directory, f"step_{k:03d}{image_suffix(x)}"))
