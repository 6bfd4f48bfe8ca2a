"""Discrete variance-preserving noise schedule.

Timesteps are integers on ``0..T``. Step 0 is the clean-data boundary with
signal coefficient 1 and noise coefficient 0; steps ``1..T`` follow the
linear-beta schedule.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

PAPER_T = 512
PAPER_BETA_START = 1e-4
PAPER_BETA_END = 2e-2


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step coefficients for ``T`` discrete steps.

    ``beta``, ``alpha_bar``, ``a`` and ``sigma`` have length ``T`` and are
    indexed by ``t - 1``. Use :meth:`signal` / :meth:`noise` for lookups that
    accept ``t = 0`` and integer arrays.
    """

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    a: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("beta", "alpha_bar", "a", "sigma"):
            getattr(self, name).setflags(write=False)
        # padded copies with the t = 0 boundary prepended
        object.__setattr__(self, "_a0", np.concatenate([[1.0], self.a]))
        object.__setattr__(self, "_s0", np.concatenate([[0.0], self.sigma]))
        object.__setattr__(self, "_ab0", np.concatenate([[1.0], self.alpha_bar]))

    def _check(self, t, low=0):
        arr = np.asarray(t)
        if arr.dtype.kind not in "iu":
            raise TypeError(f"timesteps must be integers, got {arr.dtype}")
        if arr.size and (arr.min() < low or arr.max() > self.T):
            raise IndexError(f"timestep out of range [{low}, {self.T}]: {t}")
        return arr

    def signal(self, t):
        """a_t for ``t`` in ``0..T`` (scalar or integer array)."""
        return self._a0[self._check(t)]

    def noise(self, t):
        """sigma_t for ``t`` in ``0..T``."""
        return self._s0[self._check(t)]

    def cumulative(self, t):
        return self._ab0[self._check(t)]

    def to_text(self):
        return f"T={self.T}\nbeta_start={self.beta_start!r}\nbeta_end={self.beta_end!r}\n"

    @classmethod
    def from_text(cls, text):
        vals = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            vals[key.strip()] = value.strip()
        unknown = set(vals) - {"T", "beta_start", "beta_end"}
        if unknown:
            raise ParameterError(sorted(unknown)[0], "unknown schedule key")
        return linear_beta_schedule(int(vals["T"]), float(vals["beta_start"]), float(vals["beta_end"]))

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return (self.T, self.beta_start, self.beta_end) == (other.T, other.beta_start, other.beta_end)

    def __hash__(self):
        return hash((self.T, self.beta_start, self.beta_end))


def linear_beta_schedule(T=PAPER_T, beta_start=PAPER_BETA_START, beta_end=PAPER_BETA_END):
    if int(T) != T or T < 2:
        raise ParameterError("T", f"must be an integer >= 2, got {T}")
    if not 0 < beta_start < 1:
        raise ParameterError("beta_start", f"must lie in (0, 1), got {beta_start}")
    if not 0 < beta_end < 1:
        raise ParameterError("beta_end", f"must lie in (0, 1), got {beta_end}")
    if beta_end < beta_start:
        raise ParameterError("beta_end", f"must be >= beta_start ({beta_start}), got {beta_end}")
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(
        T=T,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        beta=beta,
        alpha_bar=alpha_bar,
        a=np.sqrt(alpha_bar),
        sigma=np.sqrt(1.0 - alpha_bar),
    )


def adaptive_weight(sched: NoiseSchedule, t):
    """Distillation weight max(1, a_t^2 / sigma_t^2) for ``t`` in ``1..T``."""
    t = sched._check(t, low=1)
    a2 = sched.signal(t) ** 2
    s2 = sched.noise(t) ** 2
    return np.maximum(1.0, a2 / s2)
