"""Teacher pretraining on the Gaussian flow and refined-trajectory distillation."""

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import ratr
from .config import substream
from .errors import ParameterError, TrainingFailure
from .losses import (
    FeatureBank,
    LossWeights,
    distill_loss,
    distill_loss_grad,
    eps_loss,
    eps_loss_grad,
    perceptual_loss,
    perceptual_loss_grad,
    pixel_loss,
    pixel_loss_grad,
    total_loss,
)
from .score import CountingScore, MicroNet, NetScore, expand
from .trajectory import (
    EXTRACT_EPS,
    TimeTriple,
    decode_with_eps,
    extract_clean,
    extraction_denominator,
    forward_diffuse,
    refine,
    second_order_with_intermediate,
    uniform_grid,
)

log = logging.getLogger(__name__)

EMA_DECAY = 0.9999


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class SyntheticPairSource:
    x0: np.ndarray  # (n, C, H, W) clean patches in [0.2, 1]
    y: np.ndarray  # (n, C, H, W) degraded patches in [0, 1]
    illumination: np.ndarray  # (n, 1, H, W) true illumination

    def __len__(self):
        return self.x0.shape[0]

    def subset(self, idx):
        return SyntheticPairSource(self.x0[idx], self.y[idx], self.illumination[idx])


def _smooth_fields(rng, n, c, size, waves=3, max_freq=1.5):
    ii, jj = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing="ij")
    out = np.zeros((n, c, size, size))
    for _ in range(waves):
        fx = rng.uniform(-max_freq, max_freq, (n, c, 1, 1))
        fy = rng.uniform(-max_freq, max_freq, (n, c, 1, 1))
        ph = rng.uniform(0, 2 * np.pi, (n, c, 1, 1))
        amp = rng.uniform(0.5, 1.0, (n, c, 1, 1))
        out += amp * np.sin(2 * np.pi * (fx * ii + fy * jj) + ph)
    return out


def make_synthetic_pairs(seed, n, size, channels=3, noise=0.03, illum=(0.1, 0.5)):
    """Seeded clean/low-light pairs.

    Clean patches are sums of low-frequency sinusoids rescaled per patch to
    [0.2, 1]. The low-light observation is ``y = h * x0 + n`` with a smooth
    single-channel illumination ``h`` in ``illum`` (a random level plus a
    gentle ramp) and Gaussian read noise of std ``noise``; y is clipped to
    [0, 1].
    """
    if size < 4:
        raise ParameterError("size", f"must be >= 4, got {size}")
    rng = np.random.default_rng([int(seed), 0x5EED])
    f = _smooth_fields(rng, n, channels, size)
    lo = f.min(axis=(1, 2, 3), keepdims=True)
    hi = f.max(axis=(1, 2, 3), keepdims=True)
    x0 = 0.2 + 0.8 * (f - lo) / (hi - lo)

    h_lo, h_hi = illum
    level = rng.uniform(h_lo, h_hi, (n, 1, 1, 1))
    ii, jj = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    theta = rng.uniform(0, 2 * np.pi, (n, 1, 1, 1))
    ramp = np.cos(theta) * ii + np.sin(theta) * jj
    h = np.clip(level + 0.25 * (h_hi - h_lo) * ramp, h_lo, h_hi)

    y = h * x0 + noise * rng.standard_normal(x0.shape)
    return SyntheticPairSource(x0=x0, y=np.clip(y, 0.0, 1.0), illumination=h)


# ---------------------------------------------------------------- state


@dataclass(frozen=True)
class TeacherConfig:
    iterations: int = 20000
    lr: float = 1e-4
    batch: int = 16
    hidden: tuple = (128, 128, 128)
    emb_dim: int = 16
    precond: str = "edm"
    sigma_data: float = 0.5
    ema_decay: float = EMA_DECAY
    weight_decay: float = 0.0
    weights: LossWeights = LossWeights()
    seed: int = 0


@dataclass(frozen=True)
class DistillConfig:
    K_student: int = 2
    omega: float = 0.8
    iterations: int = 5000
    lr: float = 1e-4
    batch: int = 16
    patch: int = 8
    ema_decay: float = EMA_DECAY
    weight_decay: float = 0.0
    weights: LossWeights = LossWeights()
    use_ema_teacher: bool = True
    use_ratr: bool = True
    illum_floor: float = ratr.ILLUMINATION_FLOOR
    seed: int = 0


@dataclass(frozen=True)
class TrainState:
    """Parameters, EMA shadow, Adam moments and iteration counter.

    ``arch`` records (x_shape, hidden, emb_dim, precond, sigma_data) so the
    predictor can be rebuilt.
    """

    params: np.ndarray
    ema_params: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    iter: int
    rng_seed: int
    arch: tuple
    stats: dict = field(default_factory=dict, compare=False)

    def net(self, sched, ema=True):
        x_shape, hidden, emb_dim, precond, sigma_data = self.arch
        net = MicroNet(x_shape, hidden=hidden, emb_dim=emb_dim, params=self.ema_params if ema else self.params)
        return NetScore(net, sched, precond, sigma_data)

    @classmethod
    def fresh(cls, model: NetScore, seed, params=None):
        net = model.net
        p = net.params.copy() if params is None else np.array(params, dtype=np.float64)
        return cls(
            params=p, ema_params=p.copy(), adam_m=np.zeros_like(p), adam_v=np.zeros_like(p),
            iter=0, rng_seed=int(seed),
            arch=(net.x_shape, net.hidden, net.emb_dim, model.precond, model.sigma_data),
        )


def ema_update(state: TrainState, decay=EMA_DECAY):
    if not 0.0 <= decay < 1.0:
        raise ParameterError("decay", f"must lie in [0, 1), got {decay}")
    return replace(state, ema_params=decay * state.ema_params + (1.0 - decay) * state.params)


def warmup_decay(decay, step):
    """EMA decay capped by (1 + step) / (10 + step) during early training."""
    return min(decay, (1.0 + step) / (10.0 + step))


def adam_step(state: TrainState, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    k = state.iter + 1
    m = beta1 * state.adam_m + (1.0 - beta1) * grad
    v = beta2 * state.adam_v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**k)
    v_hat = v / (1.0 - beta2**k)
    params = state.params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return replace(state, params=params, adam_m=m, adam_v=v, iter=k)


def _optimizer_update(state, grad, lr0, iterations, weight_decay, ema_decay):
    lr = lr0 * (1.0 - state.iter / max(iterations, 1))  # linear decay to 0
    if weight_decay:
        grad = grad + weight_decay * state.params
    state = adam_step(state, grad, lr)
    return ema_update(state, warmup_decay(ema_decay, state.iter - 1))


def params_digest(params):
    return hashlib.sha256(np.ascontiguousarray(params, dtype="<f8").tobytes()).hexdigest()


# ---------------------------------------------------------------- teacher

TEACHER_COLUMNS = ("iteration", "L_eps", "L_pix", "L_per", "L_total")
DISTILL_COLUMNS = ("iteration", "L_distill", "L_pix", "L_per", "L_total")


def train_teacher(data: SyntheticPairSource, sched, config: TeacherConfig, history=None):
    """Fit an eps-predictor with the plain noise-prediction loss.

    Each step draws a batch of pairs, per-item steps uniform on 1..T and unit
    Gaussian noise. ``history`` (a list) receives one row per iteration in
    ``TEACHER_COLUMNS`` order.
    """
    x_shape = data.x0.shape[1:]
    init_seed = int(substream(config.seed, "init").integers(2**63))
    net = MicroNet(x_shape, data.y.shape[1:], hidden=config.hidden, emb_dim=config.emb_dim, seed=init_seed)
    model = NetScore(net, sched, config.precond, config.sigma_data)
    state = TrainState.fresh(model, config.seed)
    rng_data = substream(config.seed, "data")
    rng_noise = substream(config.seed, "noise")
    n = len(data)
    w = config.weights
    for k in range(config.iterations):
        idx = rng_data.integers(0, n, config.batch)
        x0, y = data.x0[idx], data.y[idx]
        t = rng_noise.integers(1, sched.T + 1, config.batch)
        eps = rng_noise.standard_normal(x0.shape)
        x_t = forward_diffuse(x0, t, eps, sched)
        model.params = state.params
        pred, cache = model.forward(x_t, y, t)
        loss = eps_loss(eps, pred, w)
        if not np.isfinite(loss):
            raise TrainingFailure(k)
        grad = model.backward(eps_loss_grad(eps, pred, w), cache)
        state = _optimizer_update(state, grad, config.lr, config.iterations, config.weight_decay, config.ema_decay)
        if history is not None:
            history.append((k, loss, 0.0, 0.0, loss))
    return state


# ---------------------------------------------------------------- distillation


def distill(teacher: TrainState, data: SyntheticPairSource, sched, dconf: DistillConfig, bank=None, history=None):
    """Distil a K-step student from a frozen teacher along refined trajectories.

    Per iteration: draw pairs and adjacent nodes (t, s) of the K-step grid,
    u = floor((s + t) / 2). The teacher makes a second-order jump t -> u -> s
    and the refinement anchor a_s x~0 + sigma_s eps(x_u, u) from the RATR
    latent clean image; the refined target blends them with ``omega``. The
    student makes one jump t -> s; both landings are mapped to clean-image
    estimates, and the student minimises distill + pixel + perceptual loss.
    """
    if not 0.0 < dconf.omega <= 1.0:
        raise ParameterError("omega", f"must lie in (0, 1], got {dconf.omega}")
    bank = FeatureBank(seed=int(substream(dconf.seed, "bank").integers(2**31))) if bank is None else bank
    teacher_params = teacher.ema_params if dconf.use_ema_teacher else teacher.params
    teacher_digest = params_digest(teacher_params)
    teacher_net = CountingScore(teacher.net(sched, ema=dconf.use_ema_teacher))
    student = teacher.net(sched, ema=dconf.use_ema_teacher)
    state = TrainState.fresh(student, dconf.seed, params=teacher_params)

    grid = uniform_grid(sched.T, dconf.K_student)
    t_nodes, s_nodes = grid[:-1], grid[1:]
    singular = np.abs(extraction_denominator(t_nodes, s_nodes, sched)) <= EXTRACT_EPS
    if singular.all():
        raise ParameterError("K_student", "every grid pair is singular for clean-image extraction")

    if dconf.use_ratr:
        anchors = ratr.latent_clean(data.y, dconf.illum_floor).latent_clean
    else:
        anchors = data.x0

    rng_data = substream(dconf.seed, "data")
    rng_noise = substream(dconf.seed, "noise")
    w = dconf.weights
    n = len(data)
    skipped = seen = student_evals = 0
    for k in range(dconf.iterations):
        idx = rng_data.integers(0, n, dconf.batch)
        j = rng_noise.integers(0, len(t_nodes), dconf.batch)
        eps = rng_noise.standard_normal(data.x0[idx].shape)
        keep = ~singular[j]
        skipped += int((~keep).sum())
        seen += dconf.batch
        if not keep.any():
            continue
        idx, j, eps = idx[keep], j[keep], eps[keep]
        x0, y, x_tilde0 = data.x0[idx], data.y[idx], anchors[idx]
        t, s = t_nodes[j], s_nodes[j]
        triple = TimeTriple.midpoint(t, s)
        x_t = forward_diffuse(x0, t, eps, sched)

        x_second, x_u = second_order_with_intermediate(teacher_net, x_t, y, triple, sched)
        anchor = ratr.refinement_anchor(teacher_net, x_u, y, triple.u, s, x_tilde0, sched)
        x_target = extract_clean(refine(x_second, anchor, dconf.omega), x_t, t, s, sched)

        student.params = state.params
        try:
            parts, loss, grad = student_objective(student, x_t, y, t, s, x0, x_target, sched, w, bank)
        except FloatingPointError as exc:
            raise TrainingFailure(k, str(exc)) from exc
        student_evals += 1
        state = _optimizer_update(state, grad, dconf.lr, dconf.iterations, dconf.weight_decay, dconf.ema_decay)
        if history is not None:
            history.append((k, parts["L_distill"], parts["L_pix"], parts["L_per"], loss))

    if seen and skipped / seen > 0.01:
        raise ParameterError("K_student", f"{skipped}/{seen} samples hit singular extraction pairs")
    if params_digest(teacher_params) != teacher_digest:  # pragma: no cover - guards the frozen-teacher contract
        raise RuntimeError("teacher parameters changed during distillation")
    stats = {
        "teacher_evals": teacher_net.evals,
        "student_evals": student_evals,
        "skipped": skipped,
        "teacher_digest": teacher_digest,
    }
    if skipped:
        log.warning("skipped %d samples on singular (t, s) pairs", skipped)
    return replace(state, stats=stats)


def student_objective(student, x_t, y, t, s, x0, x_target, sched, w: LossWeights, bank=None):
    """Student jump t -> s, clean-image extraction and the total loss.

    Returns (parts, total, grad) where ``grad`` is with respect to the
    student's flat parameters.
    """
    eps_s, cache = student.forward(x_t, y, t)
    x_est = extract_clean(decode_with_eps(x_t, eps_s, t, s, sched), x_t, t, s, sched)
    parts = {
        "L_distill": distill_loss(x_target, x_est, t, sched),
        "L_pix": pixel_loss(x0, x_est, w),
        "L_per": perceptual_loss(x0, x_est, bank, w) if w.lambda_per else 0.0,
    }
    loss = total_loss(parts)
    g_est = distill_loss_grad(x_target, x_est, t, sched) + pixel_loss_grad(x0, x_est, w)
    if w.lambda_per:
        g_est = g_est + perceptual_loss_grad(x0, x_est, bank, w)
    # x_est is affine in the student's eps with this per-item slope
    slope = (sched.noise(s) - sched.signal(s) / sched.signal(t) * sched.noise(t)) / extraction_denominator(t, s, sched)
    return parts, loss, student.backward(expand(slope, g_est) * g_est, cache)


def write_loss_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[0], *(repr(float(v)) for v in row[1:])])
