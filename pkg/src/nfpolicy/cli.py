"""Command-line entry point: ``nfp <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

if "--single-thread" in sys.argv[1:] or os.environ.get("NFP_THREADS") == "1":
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402

from . import envs as E  # noqa: E402
from . import harness as H  # noqa: E402
from . import storage  # noqa: E402
from . import tensor as T  # noqa: E402
from .diffusion import SamplerConfig  # noqa: E402
from .policy import PolicyConfig, WindowSpec  # noqa: E402

log = logging.getLogger("nfp")


class UsageError(Exception):
    pass


def positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def stages_arg(text: str) -> list:
    try:
        return H.parse_stages(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--single-thread", action="store_true", help="force sequential bit-exact execution")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_training(p):
    g = p.add_argument_group("model and optimizer")
    g.add_argument("--preset", choices=("full", "desk"), default="full",
                   help="full: hidden 2048, lr 1e-4, 300 epochs; desk: hidden 128, lr 1e-3, 80 epochs")
    g.add_argument("--hidden", type=positive_int)
    g.add_argument("--layers", type=positive_int)
    g.add_argument("--lr", type=float)
    g.add_argument("--stages", type=stages_arg, help="EPOCHSxBATCH list, e.g. 100x128,100x256,100x512")
    g.add_argument("--jitter", type=nonneg_float, help="Gaussian noise std on normalized training targets")
    g.add_argument("--transform", choices=("rq", "affine"))
    g.add_argument("--diffusion-steps", type=positive_int)


def _settings(args) -> H.TrainSettings:
    s = H.TrainSettings.desk() if args.preset == "desk" else H.TrainSettings()
    for name in ("hidden", "layers", "lr", "stages", "jitter", "transform", "diffusion_steps"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(s, name, v)
    return s


def _add_window(p):
    g = p.add_argument_group("windows")
    g.add_argument("--stride", type=positive_int, default=4)
    g.add_argument("--n-obs", type=positive_int, default=4)
    g.add_argument("--n-act", type=positive_int, default=8)
    g.add_argument("--exec-horizon", type=positive_int, default=4)
    g.add_argument("--seq", choices=("on", "off"), default="on", help="off predicts and executes one action")


def _window(args) -> WindowSpec:
    if args.seq == "off":
        return WindowSpec.unsequenced(n_obs=args.n_obs, stride=args.stride)
    if args.exec_horizon > args.n_act * args.stride:
        raise UsageError("--exec-horizon exceeds the predicted window")
    return WindowSpec(args.n_obs, args.n_act, args.stride, args.exec_horizon)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nfp", description="Normalizing-flow policies on toy manipulation tasks.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("dataset", help="generate demonstrations and write an NFPD file")
    p.add_argument("--task", choices=E.TASKS, required=True)
    p.add_argument("--episodes", type=positive_int, required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train", help="fit a policy and write a checkpoint")
    p.add_argument("--model", choices=("nf", "ddpm", "oracle"), required=True)
    p.add_argument("--task", choices=E.TASKS, required=True)
    p.add_argument("--episodes", type=positive_int, default=50)
    p.add_argument("--dataset", help="NFPD file to train on instead of fresh demonstrations")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv", help="loss curve path (default: OUT.loss.csv)")
    _add_window(p)
    _add_training(p)
    _add_common(p)

    p = sub.add_parser("eval", help="seeded rollouts of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", choices=E.TASKS, required=True)
    p.add_argument("--trials", type=positive_int, default=100)
    p.add_argument("--mode", choices=("plain", "grad", "multi"), default="plain")
    p.add_argument("--sigma", type=nonneg_float, default=0.5)
    p.add_argument("--opt-steps", type=positive_int, default=10)
    p.add_argument("--opt-lr", type=float, default=0.1)
    p.add_argument("--multi-batch", type=positive_int, default=128)
    p.add_argument("--sampler", choices=("ddim", "ddpm"), default="ddim", help="diffusion checkpoints only")
    p.add_argument("--ddpm-steps", type=positive_int, default=10, help="DDIM step count")
    p.add_argument("--max-steps", type=positive_int)
    p.add_argument("--out", help="CSV to append a result row to")
    p.add_argument("--no-timing", action="store_true", help="write latency columns as nan (byte-stable output)")
    _add_common(p)

    p = sub.add_parser("bench-latency", help="per-generation latency of flow modes vs diffusion sampling")
    p.add_argument("--ckpt-nf", required=True)
    p.add_argument("--ckpt-ddpm")
    p.add_argument("--ddpm-steps", type=int, choices=(10, 100), default=100)
    p.add_argument("--n", type=positive_int, default=1000)
    p.add_argument("--out")
    _add_common(p)

    p = sub.add_parser("ablate", help="train and evaluate every cell of a grid")
    p.add_argument("--task", choices=E.TASKS, required=True)
    p.add_argument("--episodes", type=positive_int, default=50)
    p.add_argument("--grid", default="s=1,2,4,8;sigma=0.25,0.5,0.75,1.0;mode=plain,grad,multi;seq=on,off")
    p.add_argument("--trials", type=positive_int, default=100)
    p.add_argument("--out", required=True)
    p.add_argument("--no-timing", action="store_true")
    _add_training(p)
    _add_common(p)

    p = sub.add_parser("density-check", help="integrate a 2-D flow density on a grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--grid-extent", type=float, default=6.0)
    p.add_argument("--grid-step", type=float, default=0.05)
    _add_common(p)
    return ap


# --- commands ----------------------------------------------------------------------------

def cmd_dataset(args) -> int:
    eps = E.generate_dataset(args.task, args.episodes, args.seed)
    storage.save_dataset(args.out, eps, args.seed)
    print(f"wrote {len(eps)} episodes ({sum(len(e) for e in eps)} steps) to {args.out}")
    return 0


def cmd_train(args) -> int:
    window = _window(args)
    settings = _settings(args)
    if args.model == "oracle":
        episodes = None
    elif args.dataset:
        episodes, header = storage.load_dataset(args.dataset)
        if header["task"] != args.task:
            raise UsageError(f"dataset is for task {header['task']}, not {args.task}")
    else:
        episodes = E.generate_dataset(args.task, args.episodes, args.seed)
    losses = []
    ckpt = H.train_checkpoint(args.model, args.task, episodes, window, settings, args.seed, losses)
    storage.save_checkpoint(args.out, ckpt)
    if args.model != "oracle":
        loss_path = args.loss_csv or args.out + ".loss.csv"
        H.write_rows(loss_path, ("epoch", "loss", "seed"),
                     [{"epoch": i, "loss": float(v), "seed": args.seed} for i, v in enumerate(losses)])
        print(f"trained {args.model} on {args.task}: final loss {losses[-1]:.4f}; wrote {args.out}, {loss_path}")
    else:
        print(f"wrote oracle checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = storage.load_checkpoint(args.ckpt)
    try:
        H.check_compatible(ckpt, args.task)
    except T.ShapeError as e:
        spec = E.task_spec(args.task)
        raise UsageError(f"checkpoint dims obs={ckpt.obs_dim} act={ckpt.act_dim} do not match task {args.task} "
                         f"obs={spec.obs_dim} act={spec.act_dim}") from e
    cfg = PolicyConfig(mode=args.mode, sigma=args.sigma, opt_steps=args.opt_steps, opt_lr=args.opt_lr,
                       multi_batch=args.multi_batch)
    sampler = SamplerConfig(kind=args.sampler, steps=args.ddpm_steps)
    pol = H.build_policy(ckpt, cfg, sampler)
    trajs = H.run_evaluation(args.task, pol, args.trials, args.seed, H.worker_count(args.single_thread),
                             args.max_steps)
    mode = cfg.mode if ckpt.kind == "nf" else ("-" if ckpt.kind == "oracle" else args.sampler)
    episodes = ckpt.train.get("episodes", 0)
    row = H.result_row(args.task, ckpt.kind, episodes, mode, ckpt.window.stride, args.sigma, trajs, args.seed,
                       timing=not args.no_timing)
    if args.out:
        H.write_rows(args.out, H.RESULT_FIELDS, [row], append=True)
    print(f"success rate {row['success_rate']:.3f} over {row['n_trials']} trials")
    return 0


def cmd_bench(args) -> int:
    nf = storage.load_checkpoint(args.ckpt_nf)
    if nf.kind != "nf":
        raise UsageError(f"--ckpt-nf holds a {nf.kind} checkpoint")
    dd = None
    if args.ckpt_ddpm:
        dd = storage.load_checkpoint(args.ckpt_ddpm)
        if dd.kind != "ddpm":
            raise UsageError(f"--ckpt-ddpm holds a {dd.kind} checkpoint")
        if (dd.obs_dim, dd.act_dim, dd.window) != (nf.obs_dim, nf.act_dim, nf.window):
            raise UsageError("checkpoints differ in task dimensions or windows")
    rows = H.bench_latency(nf, dd, args.n, args.ddpm_steps, args.seed)
    for r in rows:
        print(f"{r['method']:>10}: mean {r['mean_ms']:.3f} ms  p50 {r['p50_ms']:.3f}  p99 {r['p99_ms']:.3f}  "
              f"net evals {r['net_evals']:g}")
    if args.out:
        H.write_rows(args.out, H.BENCH_FIELDS, rows)
    return 0


def cmd_ablate(args) -> int:
    try:
        grid = H.parse_grid(args.grid)
    except H.GridError as e:
        raise UsageError(str(e)) from None
    settings = _settings(args)

    def show(r):
        print(f"seq/s={r['model']}/{r['s']} mode={r['mode']} sigma={r['sigma']:g}: {r['success_rate']:.3f}")

    rows = H.run_ablation(args.task, args.episodes, grid, args.trials, args.seed, settings,
                          timing=not args.no_timing, workers=H.worker_count(args.single_thread), log=show)
    H.write_rows(args.out, H.RESULT_FIELDS, rows)
    return 0


def cmd_density(args) -> int:
    ckpt = storage.load_checkpoint(args.ckpt)
    if ckpt.kind != "nf":
        raise UsageError(f"density-check needs a flow checkpoint, got {ckpt.kind}")
    if ckpt.model.dim != 2:
        raise UsageError(f"density-check refuses D={ckpt.model.dim}: only 2-D models can be gridded")
    if args.grid_step <= 0 or args.grid_extent <= 0:
        raise UsageError("grid extent and step must be positive")
    rep = H.density_check(ckpt.model, args.grid_extent, args.grid_step)
    print(f"integral {rep.integral:.6f}  max roundtrip err {rep.roundtrip:.3e}  ({rep.n_points} points)")
    return 0 if rep.ok else 1


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "eval": cmd_eval, "bench-latency": cmd_bench,
            "ablate": cmd_ablate, "density-check": cmd_density}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except UsageError as e:
        print(f"nfp {args.cmd}: error: {e}", file=sys.stderr)
        return 2
    except (T.TrainingDivergedError, T.NonFiniteError) as e:
        print(f"nfp {args.cmd}: training/generation failed: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, storage.FormatError) as e:
        print(f"nfp {args.cmd}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
