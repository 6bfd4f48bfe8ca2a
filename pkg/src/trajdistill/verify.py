"""Property suite behind ``trajdistill verify``.

Each check returns a :class:`CheckResult`; :func:`run` prints one
PASS/FAIL line per check. Checks compare the engine against closed forms,
brute-force loops or finite differences, never against itself.
"""

import sys
import time
from dataclasses import dataclass

import numpy as np

from . import metrics, ratr
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
)
from .schedule import adaptive_weight, linear_beta_schedule
from .score import ConstantScore, GaussianOracle, MicroNet, NetScore, expand
from .trajectory import (
    TimeTriple,
    decode,
    decode_with_eps,
    extract_clean,
    extraction_denominator,
    refine,
    refined_direct,
    sample,
    second_order_with_intermediate,
    teacher_second_order,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    soft: bool = False

    def line(self):
        tag = "PASS" if self.passed else ("WARN" if self.soft else "FAIL")
        return f"{tag} {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _random_net(x_shape, rng, hidden=(16, 16), scale=0.5):
    net = MicroNet(x_shape, hidden=hidden, emb_dim=8, seed=int(rng.integers(2**31)))
    net.params = net.params + scale * rng.standard_normal(net.n_params) / np.sqrt(hidden[-1])
    return net


def _random_cases(rng, sched, n):
    t = rng.integers(1, sched.T + 1, n)
    s = (rng.random(n) * t).astype(np.int64)  # 0 <= s < t
    return TimeTriple.midpoint(t, s)


# ---------------------------------------------------------------- algebra


@_timed
def check_refinement_identity(cases=1000, seed=0, tol=1e-10):
    """Anchor-blended second-order jump equals the four-term refined trajectory."""
    rng = np.random.default_rng(seed)
    sched = linear_beta_schedule()
    shape = (3, 4, 4)
    half = cases // 2
    scores = [
        (GaussianOracle(rng.random(shape), 0.05, sched), half),
        (_random_net(shape, rng), cases - half),
    ]
    worst = 0.0
    for score, n in scores:
        tri = _random_cases(rng, sched, n)
        x_t = rng.standard_normal((n, *shape))
        y = rng.random((n, *shape))
        x_tilde0 = rng.random((n, *shape))
        omega = rng.uniform(1e-3, 1.0, n)
        x_second, x_u = second_order_with_intermediate(score, x_t, y, tri, sched)
        anchor = ratr.refinement_anchor(score, x_u, y, tri.u, tri.s, x_tilde0, sched)
        eps_tilde = ratr.residual_noise(x_t, x_tilde0, tri.t, sched)
        for i in range(n):
            item = TimeTriple(tri.t[i], tri.u[i], tri.s[i])
            lhs = refine(x_second[i], anchor[i], omega[i])
            rhs = refined_direct(score, x_t[i], y[i], item, eps_tilde[i], omega[i], sched)
            err = np.max(np.abs(lhs - rhs)) / max(np.max(np.abs(rhs)), 1e-300)
            worst = max(worst, err)
    return CheckResult("refinement identity", worst < tol, f"{cases} cases, max rel err {worst:.2e} (< {tol:g})")


@_timed
def check_constant_collapse(T=32, seed=0, tol=1e-10):
    """Under a constant predictor the two-jump path equals one jump t -> s."""
    rng = np.random.default_rng(seed)
    sched = linear_beta_schedule(T)
    t, u, s = np.array([(t, u, s) for t in range(1, T + 1) for u in range(t) for s in range(u + 1)]).T
    shape = (2, 3, 3)
    score = ConstantScore(rng.standard_normal(shape))
    x_t = rng.standard_normal((t.size, *shape))
    two = teacher_second_order(score, x_t, None, TimeTriple(t, u, s), sched)
    one = decode(score, x_t, None, t, s, sched)
    err = float(np.max(np.abs(two - one)))
    return CheckResult("constant-score collapse", err < tol, f"{t.size} triples on T={T}, max abs err {err:.2e}")


@_timed
def check_schedule(tol=1e-12):
    sched = linear_beta_schedule()
    ts = np.arange(1, sched.T + 1)
    ab = np.cumprod(1.0 - np.linspace(1e-4, 2e-2, sched.T))
    ok = bool(np.all(np.diff(sched.beta) > 0) and np.all(np.diff(sched.alpha_bar) < 0))
    ok &= bool(np.all((sched.alpha_bar > 0) & (sched.alpha_bar < 1)))
    unit = float(np.max(np.abs(sched.signal(ts) ** 2 + sched.noise(ts) ** 2 - 1.0)))
    ok &= unit <= tol
    ok &= bool(np.allclose(sched.alpha_bar, ab, rtol=1e-12, atol=0))
    lam = adaptive_weight(sched, ts)
    snr = ab / (1.0 - ab)
    ok &= bool(np.all(lam >= 1.0) and np.all(np.isfinite(lam)) and np.allclose(lam, np.maximum(1.0, snr), rtol=1e-12))
    ok &= bool(np.all(np.diff(lam) <= 0))
    ok &= sched.beta[0] == 1e-4 and abs(sched.beta[-1] - 2e-2) < 1e-15
    return CheckResult("schedule sanity", ok, f"T={sched.T}, max |a^2+sigma^2-1| = {unit:.1e}")


@_timed
def check_oracle_sampling(steps=(1, 2, 4, 8, 16), seed=0, tol=1e-8):
    """A point-mass oracle is recovered exactly by deterministic sampling."""
    rng = np.random.default_rng(seed)
    sched = linear_beta_schedule()
    mu = rng.uniform(0.05, 0.95, (3, 8, 8))
    oracle = GaussianOracle(mu, 0.0, sched)
    errs = {}
    for K in steps:
        out = sample(oracle, np.zeros_like(mu), K, sched, seed=seed)
        errs[K] = float(np.max(np.abs(out - mu)))
    worst = max(errs.values())
    return CheckResult("point-mass oracle sampling", worst < tol, f"K={list(steps)}, max abs err {worst:.1e}")


# ---------------------------------------------------------------- gradients


def _fd_probe(loss_of, params, grad, rng, probes, h):
    worst = 0.0
    idx = rng.choice(params.size, probes, replace=False)
    for i in idx:
        p_hi, p_lo = params.copy(), params.copy()
        p_hi[i] += h
        p_lo[i] -= h
        num = (loss_of(p_hi) - loss_of(p_lo)) / (2 * h)
        worst = max(worst, abs(grad[i] - num) / max(1e-8, abs(num)))
    return worst


def gradient_errors(probes=50, seed=0, h=1e-5):
    """Worst per-coordinate finite-difference error for each loss term."""
    rng = np.random.default_rng(seed)
    sched = linear_beta_schedule()
    shape = (3, 6, 6)
    n = 4
    model = NetScore(_random_net(shape, rng, hidden=(12, 12), scale=2.0), sched, "edm")
    w = LossWeights(1.0, 1.0, 1.0)
    bank = FeatureBank(n_filters=4, size=5, scales=2, seed=seed)
    x0 = rng.random((n, *shape))
    y = rng.random((n, *shape))
    t = rng.integers(2, sched.T + 1, n)
    s = (rng.random(n) * t).astype(np.int64)
    x_t = rng.standard_normal((n, *shape))
    eps = rng.standard_normal((n, *shape))
    target = rng.random((n, *shape))
    slope = (sched.noise(s) - sched.signal(s) / sched.signal(t) * sched.noise(t)) / extraction_denominator(t, s, sched)

    def x_est_of(eps_pred):
        return extract_clean(decode_with_eps(x_t, eps_pred, t, s, sched), x_t, t, s, sched)

    terms = {
        "eps": (lambda e: eps_loss(eps, e, w), lambda e: eps_loss_grad(eps, e, w), False),
        "distill": (lambda x: distill_loss(target, x, t, sched), lambda x: distill_loss_grad(target, x, t, sched), True),
        "pixel": (lambda x: pixel_loss(x0, x, w), lambda x: pixel_loss_grad(x0, x, w), True),
        "perceptual": (
            lambda x: perceptual_loss(x0, x, bank, w),
            lambda x: perceptual_loss_grad(x0, x, bank, w),
            True,
        ),
    }
    base = model.params.copy()
    out = {}
    for name, (value, grad_fn, through_extract) in terms.items():

        def loss_of(p, value=value, through_extract=through_extract):
            model.params = p
            e = model(x_t, y, t)
            return value(x_est_of(e) if through_extract else e)

        model.params = base
        e, cache = model.forward(x_t, y, t)
        if through_extract:
            g_out = expand(slope, e) * grad_fn(x_est_of(e))
        else:
            g_out = grad_fn(e)
        grad = model.backward(g_out, cache)
        out[name] = _fd_probe(loss_of, base, grad, rng, probes, h)
    model.params = base
    return out


@_timed
def check_gradients(probes=50, seed=0, tol=1e-4):
    errs = gradient_errors(probes, seed)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    return CheckResult("loss gradients vs finite differences", max(errs.values()) < tol, f"{probes} probes each: {detail}")


# ---------------------------------------------------------------- RATR


@_timed
def check_ratr(seed=0, draws=10_000):
    rng = np.random.default_rng(seed)
    sched = linear_beta_schedule()
    flat = np.full((3, 8, 8), 0.37)
    ones_ok = bool(np.all(ratr.latent_clean(flat).latent_clean == 1.0))

    x0 = rng.random((16, 3, 8, 8))
    t = rng.integers(1, sched.T + 1, 16)
    eps = rng.standard_normal(x0.shape)
    x_t = expand(sched.signal(t), x0) * x0 + expand(sched.noise(t), x0) * eps
    shift_err = float(np.max(np.abs(ratr.residual_noise(x_t, x0, t, sched) - eps)))

    x0 = rng.random((draws, 1))
    t = rng.integers(1, sched.T + 1, draws)
    eps = rng.standard_normal((draws, 1))
    x_t = expand(sched.signal(t), x0) * x0 + expand(sched.noise(t), x0) * eps
    e = ratr.residual_noise(x_t, x0, t, sched).ravel()
    z_mean = abs(e.mean()) / (1.0 / np.sqrt(draws))
    z_var = abs(e.var() - 1.0) / np.sqrt(2.0 / draws)
    ok = ones_ok and shift_err <= 1e-12 and z_mean < 3 and z_var < 3
    return CheckResult(
        "RATR invariants", ok,
        f"flat field -> ones: {ones_ok}, residual shift err {shift_err:.1e}, "
        f"moment z-scores mean {z_mean:.2f} var {z_var:.2f}",
    )


# ---------------------------------------------------------------- metrics


def psnr_loop(a, b):
    a, b = metrics.luminance(a), metrics.luminance(b)
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            total += (float(a[i, j]) - float(b[i, j])) ** 2
    err = total / a.size
    return metrics.PSNR_CAP if err == 0 else min(metrics.PSNR_CAP, 10 * np.log10(1 / err))


def ssim_loop(a, b, window=metrics.SSIM_WINDOW):
    a, b = metrics.luminance(a), metrics.luminance(b)
    vals = []
    for i in range(a.shape[0] - window + 1):
        for j in range(a.shape[1] - window + 1):
            pa = a[i : i + window, j : j + window]
            pb = b[i : i + window, j : j + window]
            ma, mb = pa.mean(), pb.mean()
            va, vb = ((pa - ma) ** 2).mean(), ((pb - mb) ** 2).mean()
            cov = ((pa - ma) * (pb - mb)).mean()
            vals.append(
                (2 * ma * mb + metrics.C1) * (2 * cov + metrics.C2)
                / ((ma * ma + mb * mb + metrics.C1) * (va + vb + metrics.C2))
            )
    return float(np.mean(vals))


@_timed
def check_metrics(seed=0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 0.9, (3, 16, 16))
    p20 = metrics.psnr(a, a + 0.1)
    s1 = metrics.ssim(a, a)
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    dp = abs(metrics.psnr(a, b) - psnr_loop(a, b))
    ds = abs(metrics.ssim(a, b) - ssim_loop(a, b))
    ok = abs(p20 - 20.0) <= 1e-6 and s1 == 1.0 and dp <= 1e-9 and ds <= 1e-9
    return CheckResult(
        "metric oracles", ok,
        f"offset-0.1 PSNR {p20:.9f} dB, SSIM(a,a) = {s1!r}, loop diffs {dp:.1e} dB / {ds:.1e}",
    )


CHECKS = (
    check_refinement_identity,
    check_constant_collapse,
    check_schedule,
    check_oracle_sampling,
    check_gradients,
    check_ratr,
    check_metrics,
)


def check_omega_sweep(cfg=None, omegas=(0.8, 1.0)):
    """Desk-scale teacher/student run; soft check that refinement helps."""
    from .config import RunConfig
    from .pipeline import run_desk

    cfg = RunConfig() if cfg is None else cfg
    t0 = time.perf_counter()
    res = run_desk(cfg, omegas=omegas)
    parts = [f"teacher {K}-step {v:.3f} dB" for K, v in sorted(res.teacher_psnr.items())]
    parts += [f"student w={w:g} {v:.3f} dB" for w, v in res.student_psnr.items()]
    ok = res.student_psnr[omegas[0]] > res.student_psnr[omegas[-1]]
    detail = f"seed {cfg.seed}: " + ", ".join(parts)
    return CheckResult(f"omega sweep {omegas[0]:g} > {omegas[-1]:g}", ok, detail, time.perf_counter() - t0, soft=True)


def run(long=False, stream=None, cfg=None):
    """Run every check, print one line each; returns True when no hard check fails."""
    stream = sys.stdout if stream is None else stream
    results = [check() for check in CHECKS]
    for r in results:
        print(r.line(), file=stream, flush=True)
    if long:
        r = check_omega_sweep(cfg)
        print(r.line(), file=stream, flush=True)
        results.append(r)
    return all(r.passed or r.soft for r in results)
