"""Run configuration as flat ``key=value`` text with ``#`` comments."""

import dataclasses
import zlib
from dataclasses import dataclass, fields

import numpy as np

from .errors import ParameterError


def substream(seed, name):
    """Named, independent RNG stream derived from the master seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


@dataclass(frozen=True)
class RunConfig:
    # schedule
    T: int = 512
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    # data and model
    channels: int = 3
    patch: int = 8
    n_train: int = 8192
    n_test: int = 200
    hidden: tuple = (128, 128, 128)
    emb_dim: int = 16
    precond: str = "edm"
    sigma_data: float = 0.5
    illum_floor: float = 0.05
    # optimisation
    teacher_iters: int = 20000
    teacher_lr: float = 1e-3
    distill_iters: int = 5000
    lr: float = 1e-3
    batch: int = 16
    ema_decay: float = 0.9999
    weight_decay: float = 0.0
    use_ema_teacher: bool = True
    # distillation
    k_student: int = 2
    omega: float = 0.8
    lambda_eps: float = 1.0
    lambda_pix: float = 10.0
    lambda_per: float = 0.1
    # evaluation and bookkeeping
    eval_steps: tuple = (2, 16)
    seed: int = 0
    out: str = ""

    def __post_init__(self):
        if not 0.0 < self.omega <= 1.0:
            raise ParameterError("omega", f"must lie in (0, 1], got {self.omega}")
        if not 1 <= self.k_student <= self.T:
            raise ParameterError("k_student", f"must lie in [1, {self.T}], got {self.k_student}")
        if self.patch < 4:
            raise ParameterError("patch", f"must be >= 4, got {self.patch}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ParameterError("ema_decay", f"must lie in [0, 1), got {self.ema_decay}")
        for name in ("teacher_iters", "distill_iters", "n_train", "n_test"):
            if getattr(self, name) < 0:
                raise ParameterError(name, "must be >= 0")
        if self.batch < 1:
            raise ParameterError("batch", "must be >= 1")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in fields(self):
            lines.append(f"{f.name}={_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, **overrides):
        kinds = {f.name: f.default for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ParameterError(f"line {lineno}", f"expected key=value, got {raw!r}")
            if key not in kinds:
                raise ParameterError(key, "unknown configuration key")
            values[key] = _parse(key, value.strip(), kinds[key])
        values.update(overrides)
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), **overrides)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(i) for i in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key, text, default):
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(p) for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ParameterError(key, f"cannot parse {text!r}") from None
