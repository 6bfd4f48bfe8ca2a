"""Command-line entry point: ``trajdistill <command> [options]``.

Exit status is 0 on success, 1 on an operational failure (bad file, failed
training, failed verification) and 2 on a usage error. Diagnostics go to
stderr; only requested results go to stdout.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import metrics, ratr
from .config import RunConfig
from .errors import ParameterError
from .imageio import image_suffix, read_image, write_image

log = logging.getLogger("trajdistill")

ENHANCE_COLUMNS = ("input", "output", "steps", "psnr", "ssim")


class UsageError(Exception):
    pass


def _config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "omega", None) is not None:
        changes["omega"] = args.omega
    if getattr(args, "steps", None) is not None and args.command == "distill":
        changes["k_student"] = args.steps
    if getattr(args, "out", None):
        changes["out"] = args.out
    return cfg.replace(**changes) if changes else cfg


def _out_dir(args, cfg):
    out = args.out or cfg.out
    if not out:
        raise UsageError("--out is required (or set out= in the config)")
    return out


# ---------------------------------------------------------------- commands


def cmd_train_teacher(args):
    from .pipeline import save_checkpoint, schedule_for, teacher_config, train_pairs
    from .train import TEACHER_COLUMNS, train_teacher

    cfg = _config(args)
    out = _out_dir(args, cfg)
    hist = []
    log.info("training teacher: %d iterations, seed %d", cfg.teacher_iters, cfg.seed)
    state = train_teacher(train_pairs(cfg), schedule_for(cfg), teacher_config(cfg), history=hist)
    save_checkpoint(out, state, cfg, TEACHER_COLUMNS, hist)
    log.info("wrote %s", out)
    return 0


def cmd_distill(args):
    from .pipeline import distill_config, load_state, save_checkpoint, schedule_for, train_pairs
    from .train import DISTILL_COLUMNS, distill

    teacher, tcfg = load_state(args.teacher)
    cfg = _config(args)
    arch = ("channels", "patch", "hidden", "emb_dim", "precond", "sigma_data", "T", "beta_start", "beta_end")
    diff = [k for k in arch if getattr(cfg, k) != getattr(tcfg, k)]
    if diff:
        if args.config:
            raise ParameterError(diff[0], "differs between --config and the teacher checkpoint")
        cfg = cfg.replace(**{k: getattr(tcfg, k) for k in diff})
    out = _out_dir(args, cfg)
    hist = []
    log.info("distilling K=%d, omega=%g, %d iterations", cfg.k_student, cfg.omega, cfg.distill_iters)
    state = distill(teacher, train_pairs(cfg), schedule_for(cfg), distill_config(cfg), history=hist)
    save_checkpoint(out, state, cfg, DISTILL_COLUMNS, hist)
    log.info("teacher evaluations per iteration: %.1f", state.stats["teacher_evals"] / max(cfg.distill_iters, 1))
    return 0


def _parent(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    return d


def _model(args):
    from .pipeline import load_model, schedule_for

    model, cfg = load_model(args.model, ema=True)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    K = args.steps if args.steps is not None else cfg.k_student
    return model, cfg, schedule_for(cfg), K


def cmd_sample(args):
    from .trajectory import sample

    model, cfg, sched, K = _model(args)
    y = read_image(args.input)
    if y.shape != model.net.y_shape:
        raise ParameterError("input", f"image shape {y.shape} does not match the model's {model.net.y_shape}")
    trace = os.path.join(_parent(args.out), "trace") if args.trace else None
    x = sample(model, y, K, sched, seed=cfg.seed, trace_dir=trace)
    write_image(x, args.out)
    return 0


def _tiles(img, p):
    c, h, w = img.shape
    ph, pw = -h % p, -w % p
    padded = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    H, W = padded.shape[1:]
    tiles = padded.reshape(c, H // p, p, W // p, p).transpose(1, 3, 0, 2, 4).reshape(-1, c, p, p)
    return tiles, (H // p, W // p)


def _untile(tiles, grid, shape):
    c, h, w = shape
    gh, gw = grid
    p = tiles.shape[-1]
    full = tiles.reshape(gh, gw, c, p, p).transpose(2, 0, 3, 1, 4).reshape(c, gh * p, gw * p)
    return full[:, :h, :w]


def cmd_enhance(args):
    from .pipeline import TEST_DATA_OFFSET
    from .train import make_synthetic_pairs
    from .trajectory import sample

    model, cfg, sched, K = _model(args)
    out = args.out
    _parent(out)
    stem = os.path.splitext(out)[0]
    reference = None
    if args.input:
        y = read_image(args.input)
        source = args.input
        if args.reference:
            reference = read_image(args.reference)
    else:
        # no input: enhance one held-out synthetic pair and keep its reference
        pair = make_synthetic_pairs(cfg.seed + TEST_DATA_OFFSET, 1, cfg.patch, cfg.channels)
        y, reference = pair.y[0], pair.x0[0]
        source = stem + "_input" + image_suffix(y)
        write_image(y, source)
        write_image(reference, stem + "_reference" + image_suffix(reference))
    if y.ndim == 2:
        y = y[None]
    if y.shape[0] != cfg.channels:
        raise ParameterError("input", f"image has {y.shape[0]} channels, model expects {cfg.channels}")
    tiles, grid = _tiles(y, cfg.patch)
    trace = stem + "_trace" if args.trace else None
    x = _untile(sample(model, tiles, K, sched, seed=cfg.seed, trace_dir=trace), grid, y.shape)
    write_image(x, out)

    row = [source, out, str(K), "", ""]
    if reference is not None:
        if reference.ndim == 2:
            reference = reference[None]
        row[3] = repr(float(metrics.psnr(x, reference)))
        row[4] = repr(float(metrics.ssim(x, reference))) if min(x.shape[1:]) >= metrics.SSIM_WINDOW else "nan"
    csv_path = stem + ".csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(ENHANCE_COLUMNS) + "\n" + ",".join(row) + "\n")
    print(",".join(row))
    return 0


def cmd_ratr(args):
    y = read_image(args.input)
    dec = ratr.latent_clean(y, args.floor)
    os.makedirs(args.out, exist_ok=True)
    squeeze = y.ndim == 2
    for name, arr in (("illumination", dec.illumination), ("noise", dec.noise_map), ("latent", dec.latent_clean)):
        arr = arr[0] if (squeeze or arr.shape[0] == 1) else arr
        if name == "noise":
            arr = np.clip(arr, 0.0, 1.0)
        write_image(arr, os.path.join(args.out, name + image_suffix(arr)))
    return 0


def cmd_metrics(args):
    a, b = read_image(args.a), read_image(args.b)
    r = metrics.report(a, b)
    print(f"{r.psnr!r},{r.ssim!r},{r.mse!r}")
    return 0


def cmd_verify(args):
    from . import verify

    cfg = _config(args) if args.long else None
    return 0 if verify.run(long=args.long, cfg=cfg) else 1


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="trajdistill", description="Refined-trajectory distillation for conditional diffusion.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", metavar="PATH", help="key=value run configuration")
        sp.add_argument("--seed", type=int, metavar="N")

    sp = sub.add_parser("train-teacher", help="pretrain the teacher eps-predictor")
    common(sp)
    sp.add_argument("--out", metavar="PATH", help="checkpoint directory")
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("distill", help="distil a few-step student from a teacher checkpoint")
    common(sp)
    sp.add_argument("--teacher", metavar="PATH", required=True, help="teacher checkpoint directory")
    sp.add_argument("--steps", type=int, metavar="K", help="student step count")
    sp.add_argument("--omega", type=float, metavar="W", help="refinement strength in (0, 1]")
    sp.add_argument("--out", metavar="PATH", help="checkpoint directory")
    sp.set_defaults(func=cmd_distill)

    for name, func, helptext in (
        ("sample", cmd_sample, "K-step sampling for one patch-sized condition image"),
        ("enhance", cmd_enhance, "tile an image into patches and enhance it"),
    ):
        sp = sub.add_parser(name, help=helptext)
        common(sp, config=False)
        sp.add_argument("--model", metavar="PATH", required=True, help="checkpoint directory")
        sp.add_argument("--input", metavar="PATH", required=(name == "sample"), help="PGM/PPM condition image")
        sp.add_argument("--steps", type=int, metavar="K")
        sp.add_argument("--out", metavar="PATH", required=True, help="output image path")
        sp.add_argument("--trace", action="store_true", help="dump every intermediate latent")
        if name == "enhance":
            sp.add_argument("--reference", metavar="PATH", help="clean reference for the metric row")
        sp.set_defaults(func=func)

    sp = sub.add_parser("ratr", help="write the illumination, noise and latent clean maps")
    sp.add_argument("--input", metavar="PATH", required=True)
    sp.add_argument("--out", metavar="PATH", required=True, help="output directory")
    sp.add_argument("--floor", type=float, default=ratr.ILLUMINATION_FLOOR)
    sp.set_defaults(func=cmd_ratr)

    sp = sub.add_parser("metrics", help="print psnr,ssim,mse for two images")
    sp.add_argument("a")
    sp.add_argument("b")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("verify", help="run the property suite")
    common(sp)
    sp.add_argument("--long", action="store_true", help="also run the desk-scale omega sweep")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"trajdistill: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"trajdistill: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
