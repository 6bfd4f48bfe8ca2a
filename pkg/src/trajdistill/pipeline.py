"""Desk-scale teacher -> student pipeline and held-out evaluation."""

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .config import RunConfig
from .losses import LossWeights
from .schedule import linear_beta_schedule
from .score import save_params
from .train import (
    DISTILL_COLUMNS,
    TEACHER_COLUMNS,
    DistillConfig,
    TeacherConfig,
    distill,
    make_synthetic_pairs,
    train_teacher,
    write_loss_csv,
)
from .trajectory import sample

log = logging.getLogger(__name__)

TRAIN_DATA_OFFSET = 0
TEST_DATA_OFFSET = 1_000_003


def schedule_for(cfg: RunConfig):
    return linear_beta_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def weights_for(cfg: RunConfig):
    return LossWeights(cfg.lambda_eps, cfg.lambda_pix, cfg.lambda_per)


def teacher_config(cfg: RunConfig):
    return TeacherConfig(
        iterations=cfg.teacher_iters, lr=cfg.teacher_lr, batch=cfg.batch, hidden=cfg.hidden,
        emb_dim=cfg.emb_dim, precond=cfg.precond, sigma_data=cfg.sigma_data, ema_decay=cfg.ema_decay, weight_decay=cfg.weight_decay,
        weights=weights_for(cfg), seed=cfg.seed,
    )


def distill_config(cfg: RunConfig, omega=None):
    return DistillConfig(
        K_student=cfg.k_student, omega=cfg.omega if omega is None else omega,
        iterations=cfg.distill_iters, lr=cfg.lr, batch=cfg.batch, patch=cfg.patch,
        ema_decay=cfg.ema_decay, weight_decay=cfg.weight_decay, weights=weights_for(cfg),
        use_ema_teacher=cfg.use_ema_teacher, illum_floor=cfg.illum_floor, seed=cfg.seed,
    )


def train_pairs(cfg: RunConfig):
    return make_synthetic_pairs(cfg.seed + TRAIN_DATA_OFFSET, cfg.n_train, cfg.patch, cfg.channels)


def test_pairs(cfg: RunConfig):
    return make_synthetic_pairs(cfg.seed + TEST_DATA_OFFSET, cfg.n_test, cfg.patch, cfg.channels)


def evaluate(score, pairs, K, sched, seed=0, mode="deterministic"):
    """Mean PSNR / SSIM of K-step samples against the clean references."""
    out = sample(score, pairs.y, K, sched, mode=mode, seed=seed)
    ps = [metrics.psnr(o, r) for o, r in zip(out, pairs.x0)]
    ss = [metrics.ssim(o, r) for o, r in zip(out, pairs.x0)] if pairs.x0.shape[-1] >= metrics.SSIM_WINDOW else [np.nan]
    return float(np.mean(ps)), float(np.mean(ss))


@dataclass
class DeskResult:
    teacher_psnr: dict = field(default_factory=dict)  # K -> dB
    student_psnr: dict = field(default_factory=dict)  # omega -> dB at k_student
    student_ssim: dict = field(default_factory=dict)
    teacher_ssim: dict = field(default_factory=dict)
    teacher_digest: str = ""
    student_digests: dict = field(default_factory=dict)
    teacher_evals_per_iter: float = 0.0


def run_desk(cfg: RunConfig, out_dir=None, omegas=None):
    """Train a teacher, distil one student per omega, evaluate on held-out pairs.

    With ``out_dir`` set, writes ``teacher/`` and ``student_w<omega>/``
    checkpoints (params.bin, ema.bin, config.txt, loss.csv).
    """
    sched = schedule_for(cfg)
    train, test = train_pairs(cfg), test_pairs(cfg)
    omegas = (cfg.omega,) if omegas is None else tuple(omegas)
    res = DeskResult()

    hist = []
    log.info("training teacher for %d iterations", cfg.teacher_iters)
    teacher = train_teacher(train, sched, teacher_config(cfg), history=hist)
    from .train import params_digest

    res.teacher_digest = params_digest(teacher.ema_params)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "teacher"), teacher, cfg, TEACHER_COLUMNS, hist)
    tnet = teacher.net(sched, ema=cfg.use_ema_teacher)
    for K in sorted(set(cfg.eval_steps) | {cfg.k_student}):
        res.teacher_psnr[K], res.teacher_ssim[K] = evaluate(tnet, test, K, sched, seed=cfg.seed)
        log.info("teacher %d-step: %.3f dB", K, res.teacher_psnr[K])

    for omega in omegas:
        hist = []
        student = distill(teacher, train, sched, distill_config(cfg, omega), history=hist)
        res.teacher_evals_per_iter = student.stats["teacher_evals"] / max(cfg.distill_iters, 1)
        res.student_digests[omega] = params_digest(student.ema_params)
        if out_dir:
            save_checkpoint(
                os.path.join(out_dir, f"student_w{omega:g}"), student, cfg.replace(omega=omega), DISTILL_COLUMNS, hist
            )
        res.student_psnr[omega], res.student_ssim[omega] = evaluate(
            student.net(sched, ema=True), test, cfg.k_student, sched, seed=cfg.seed
        )
        log.info("student omega=%g %d-step: %.3f dB", omega, cfg.k_student, res.student_psnr[omega])
    return res


def save_checkpoint(directory, state, cfg, columns, history):
    os.makedirs(directory, exist_ok=True)
    save_params(os.path.join(directory, "params.bin"), state.params)
    save_params(os.path.join(directory, "ema.bin"), state.ema_params)
    cfg.save(os.path.join(directory, "config.txt"))
    write_loss_csv(os.path.join(directory, "loss.csv"), columns, history)


def load_model(directory, ema=True):
    """Rebuild the eps-predictor saved by :func:`save_checkpoint`."""
    from .score import MicroNet, NetScore, load_params

    cfg = RunConfig.load(os.path.join(directory, "config.txt"))
    params = load_params(os.path.join(directory, "ema.bin" if ema else "params.bin"))
    shape = (cfg.channels, cfg.patch, cfg.patch)
    net = MicroNet(shape, hidden=cfg.hidden, emb_dim=cfg.emb_dim, params=params)
    return NetScore(net, schedule_for(cfg), cfg.precond, cfg.sigma_data), cfg


def load_state(directory):
    """Rebuild a :class:`TrainState` (fresh optimizer moments) from a checkpoint."""
    from .score import load_params
    from .train import TrainState

    cfg = RunConfig.load(os.path.join(directory, "config.txt"))
    params = load_params(os.path.join(directory, "params.bin"))
    ema = load_params(os.path.join(directory, "ema.bin"))
    if params.shape != ema.shape:
        raise ValueError(f"{directory}: params and ema lengths differ")
    shape = (cfg.channels, cfg.patch, cfg.patch)
    state = TrainState(
        params=params, ema_params=ema, adam_m=np.zeros_like(params), adam_v=np.zeros_like(params),
        iter=0, rng_seed=cfg.seed, arch=(shape, tuple(cfg.hidden), cfg.emb_dim, cfg.precond, cfg.sigma_data),
    )
    return state, cfg
