"""Noise predictors eps(x_t, y, t).

Every predictor is a callable ``score(x_t, y, t)`` returning an array shaped
like ``x_t``. Inputs may carry a leading batch axis; ``t`` is then either an
int shared by the batch or an integer array with one step per item.
"""

import struct

import numpy as np

from .errors import ShapeError, StateError
from .schedule import NoiseSchedule


def expand(coef, x):
    """Reshape per-item coefficients so they broadcast against ``x``."""
    coef = np.asarray(coef, dtype=np.float64)
    return coef.reshape(coef.shape + (1,) * (np.ndim(x) - coef.ndim))


class ScoreFunction:
    """Base class for noise predictors."""

    def __call__(self, x_t, y, t):
        raise NotImplementedError


class GaussianOracle(ScoreFunction):
    """Exact MMSE noise predictor when clean data is Normal(mu, s2 * I).

    Ignores the condition ``y``. With ``s2 = 0`` the data is a point mass and
    the true noise is recovered exactly.
    """

    def __init__(self, mu, s2, sched: NoiseSchedule):
        if s2 < 0:
            raise ValueError(f"s2 must be >= 0, got {s2}")
        self.mu = np.asarray(mu, dtype=np.float64)
        self.s2 = float(s2)
        self.sched = sched

    def __call__(self, x_t, y, t):
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape[x_t.ndim - self.mu.ndim :] != self.mu.shape:
            raise ShapeError(f"x_t shape {x_t.shape} does not end with mu shape {self.mu.shape}")
        a = expand(self.sched.signal(t), x_t)
        s = expand(self.sched.noise(t), x_t)
        return s * (x_t - a * self.mu) / (a * a * self.s2 + s * s)


def gaussian_oracle(mu, s2, sched):
    return GaussianOracle(mu, s2, sched)


class ConstantScore(ScoreFunction):
    def __init__(self, e):
        self.e = np.asarray(e, dtype=np.float64)

    def __call__(self, x_t, y, t):
        return np.broadcast_to(self.e, np.shape(x_t)).copy()


def constant_score(e):
    return ConstantScore(e)


class CountingScore(ScoreFunction):
    """Wraps a predictor and counts evaluations (one per call, batched or not)."""

    def __init__(self, inner):
        self.inner = inner
        self.evals = 0

    def __call__(self, x_t, y, t):
        self.evals += 1
        return self.inner(x_t, y, t)


# ---------------------------------------------------------------- micro net


def timestep_embedding(t, dim=16):
    """Sinusoidal features [sin(t f_k), cos(t f_k)] with geometric frequencies."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def _silu(z):
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free logistic
    return z * sig, sig


class MicroNet(ScoreFunction):
    """Fully connected eps-predictor with hand-written reverse mode.

    The input row is ``[flatten(x_t), flatten(y), embed(t)]``; hidden layers
    use SiLU and the output layer is linear. Parameters live in one flat
    float64 vector laid out layer by layer as ``W (fan_in x fan_out)`` then
    ``b (fan_out)``.
    """

    def __init__(self, x_shape, y_shape=None, hidden=(128, 128, 128), emb_dim=16, seed=0, params=None):
        self.x_shape = tuple(x_shape)
        self.y_shape = tuple(y_shape) if y_shape is not None else self.x_shape
        self.hidden = tuple(int(h) for h in hidden)
        self.emb_dim = int(emb_dim)
        d_x = int(np.prod(self.x_shape))
        d_y = int(np.prod(self.y_shape))
        self.widths = (d_x + d_y + self.emb_dim, *self.hidden, d_x)
        self._slices = []
        off = 0
        for fin, fout in zip(self.widths[:-1], self.widths[1:]):
            w = slice(off, off + fin * fout)
            off += fin * fout
            b = slice(off, off + fout)
            off += fout
            self._slices.append((w, b, fin, fout))
        self.n_params = off
        self._version = 0
        if params is None:
            params = self.init_params(seed)
        self.params = params

    @property
    def params(self):
        return self._params

    @params.setter
    def params(self, value):
        value = np.array(value, dtype=np.float64)
        if value.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got shape {value.shape}")
        self._params = value
        self._version += 1

    def init_params(self, seed):
        rng = np.random.default_rng(seed)
        p = np.zeros(self.n_params)
        for w, b, fin, fout in self._slices[:-1]:
            bound = 1.0 / np.sqrt(fin)
            p[w] = rng.uniform(-bound, bound, fin * fout)
            p[b] = rng.uniform(-bound, bound, fout)
        # final layer stays zero: the untrained net predicts eps = 0
        return p

    def layers(self, params=None):
        p = self._params if params is None else params
        return [(p[w].reshape(fin, fout), p[b]) for w, b, fin, fout in self._slices]

    def clone(self, params=None):
        return MicroNet(
            self.x_shape, self.y_shape, self.hidden, self.emb_dim,
            params=self._params if params is None else params,
        )

    def _inputs(self, x_t, y, t):
        x_t = np.asarray(x_t, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        nd = len(self.x_shape)
        if x_t.shape[x_t.ndim - nd :] != self.x_shape:
            raise ShapeError(f"x_t shape {x_t.shape} does not match net input {self.x_shape}")
        batch = x_t.shape[: x_t.ndim - nd]
        if len(batch) > 1:
            raise ShapeError("at most one batch axis is supported")
        n = batch[0] if batch else 1
        try:
            yf = np.broadcast_to(y.reshape(-1, int(np.prod(self.y_shape))), (n, int(np.prod(self.y_shape))))
        except ValueError as exc:
            raise ShapeError(f"condition shape {y.shape} does not match {self.y_shape}") from exc
        emb = np.broadcast_to(timestep_embedding(t, self.emb_dim).reshape(-1, self.emb_dim), (n, self.emb_dim))
        inp = np.concatenate([x_t.reshape(n, -1), yf, emb], axis=1)
        return inp, x_t.shape

    def forward(self, x_t, y, t):
        """Return (eps, cache); ``cache`` feeds :meth:`backward`."""
        inp, shape = self._inputs(x_t, y, t)
        acts = [inp]
        sigs = []
        h = inp
        layers = self.layers()
        for W, b in layers[:-1]:
            z = h @ W + b
            h, sig = _silu(z)
            acts.append(h)
            sigs.append((z, sig))
        W, b = layers[-1]
        out = h @ W + b
        cache = {"acts": acts, "sigs": sigs, "version": self._version, "shape": shape}
        return out.reshape(shape), cache

    def __call__(self, x_t, y, t):
        return self.forward(x_t, y, t)[0]

    def backward(self, grad_out, cache):
        """Gradient of a scalar loss w.r.t. the flat parameter vector.

        ``grad_out`` is dL/d(eps) with the same shape as the forward output.
        """
        if cache is None or cache.get("version") != self._version:
            raise StateError("forward cache is stale: parameters changed since the forward pass")
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != cache["shape"]:
            raise ShapeError(f"upstream gradient shape {g.shape} != output shape {cache['shape']}")
        g = g.reshape(cache["acts"][0].shape[0], -1)
        grad = np.empty(self.n_params)
        layers = self.layers()
        acts, sigs = cache["acts"], cache["sigs"]
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            w_sl, b_sl, _, _ = self._slices[i]
            grad[w_sl] = (acts[i].T @ g).ravel()
            grad[b_sl] = g.sum(axis=0)
            if i == 0:
                break
            g = g @ W.T
            z, sig = sigs[i - 1]
            g = g * (sig * (1.0 + z * (1.0 - sig)))
        return grad


class NetScore(ScoreFunction):
    """Noise predictor built on a :class:`MicroNet` output ``F``.

    ``precond="eps"`` reads ``F`` as the noise directly. ``precond="edm"``
    reads it through skip/output scalings: with ``r = sigma_t / a_t`` the clean
    estimate is ``x0 = c_skip x_t / a_t + c_out F`` where
    ``c_skip = sd^2 / (r^2 + sd^2)`` and ``c_out = r sd / sqrt(r^2 + sd^2)``,
    and the returned noise is ``(x_t - a_t x0) / sigma_t``. The skip path lets
    a narrow net pass the noisy input through at small t.
    """

    def __init__(self, net: MicroNet, sched: NoiseSchedule, precond="eps", sigma_data=0.5):
        if precond not in ("eps", "edm"):
            raise ValueError(f"unknown preconditioning {precond!r}")
        self.net = net
        self.sched = sched
        self.precond = precond
        self.sigma_data = float(sigma_data)

    def _coefs(self, x_t, t):
        if np.any(np.asarray(t) < 1):
            raise ValueError("noise prediction is undefined at t = 0")
        a = expand(self.sched.signal(t), x_t)
        sg = expand(self.sched.noise(t), x_t)
        r2 = (sg / a) ** 2
        sd2 = self.sigma_data**2
        skip = r2 / ((r2 + sd2) * sg)  # coefficient on x_t
        out = -self.sigma_data / np.sqrt(r2 + sd2)  # coefficient on F
        return skip, out

    def forward(self, x_t, y, t):
        F, cache = self.net.forward(x_t, y, t)
        if self.precond == "eps":
            return F, (cache, None)
        skip, out = self._coefs(F, t)
        return skip * np.asarray(x_t, dtype=np.float64) + out * F, (cache, out)

    def __call__(self, x_t, y, t):
        return self.forward(x_t, y, t)[0]

    def backward(self, grad_eps, cache):
        net_cache, out = cache
        g = np.asarray(grad_eps, dtype=np.float64)
        return self.net.backward(g if out is None else out * g, net_cache)

    @property
    def params(self):
        return self.net.params

    @params.setter
    def params(self, value):
        self.net.params = value


def micronet_forward(net: MicroNet, x_t, y, t):
    return net.forward(x_t, y, t)


def micronet_backward(net: MicroNet, loss_grad_at_output, cached_activations):
    return net.backward(loss_grad_at_output, cached_activations)


# ---------------------------------------------------------------- param files
# Layout: 16-byte little-endian header  <4s magic "TDPV"><u32 version><u64 count>
# followed by ``count`` little-endian float64 values.

PARAM_MAGIC = b"TDPV"
PARAM_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def save_params(path, params):
    params = np.asarray(params, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PARAM_MAGIC, PARAM_VERSION, params.size))
        fh.write(params.tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, count = _HEADER.unpack_from(blob)
    if magic != PARAM_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != PARAM_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = blob[_HEADER.size :]
    if len(body) != 8 * count:
        raise ValueError(f"{path}: expected {count} parameters, found {len(body) / 8:g}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)
