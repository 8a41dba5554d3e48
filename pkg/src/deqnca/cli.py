"""Command-line entry point: train | eval | rollout | crop-eval | gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Flags mirror RunConfig fields in kebab-case; a flat key=value config file
can seed any of them, with explicit flags winning.  The MNIST data
directory defaults to $DEQNCA_DATA_DIR or ./data.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import ops
from .data import IdxFormatError, MnistDataset, crop, load_idx_images
from .equilibrium import EquilibriumContext, RolloutError, nca_rollout
from .gradcheck import DEFAULT_TOLERANCE, run_report
from .model import (
    CheckpointError,
    encode,
    equilibrium_fn,
    load_checkpoint,
    readout,
)
from .solvers import DivergenceError
from .train import (
    NumericalError,
    RunConfig,
    config_from_sources,
    evaluate,
    load_config_file,
    train,
)
from .viz import FrameSpec, render_frame, write_csv_residuals, write_ppm

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    for name in ("data-dir", "train-images", "train-labels", "test-images",
                 "test-labels", "solver", "backward", "out-dir"):
        p.add_argument(f"--{name}", type=str)
    for name in ("epochs", "batch-size", "train-max-iters", "eval-max-iters",
                 "backward-max-iters", "anderson-memory", "broyden-memory",
                 "seed", "ce", "cz", "hm", "train-limit", "test-limit"):
        p.add_argument(f"--{name}", type=int)
    for name in ("lr", "momentum", "train-tol", "eval-tol", "backward-tol",
                 "damping", "anderson-mixing"):
        p.add_argument(f"--{name}", type=float)


def _build_config(args):
    file_values = load_config_file(args.config) if args.config else {}
    keys = {f for f in RunConfig.__dataclass_fields__}
    overrides = {k: v for k, v in vars(args).items() if k in keys}
    return config_from_sources(file_values, overrides)


def build_parser():
    parser = _Parser(prog="deqnca", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on MNIST and save checkpoints")
    _add_config_flags(p_train)

    p_eval = sub.add_parser("eval", help="report test accuracy for a checkpoint")
    p_eval.add_argument("checkpoint")
    _add_config_flags(p_eval)

    p_roll = sub.add_parser("rollout", help="replay the update map step by step")
    p_roll.add_argument("checkpoint")
    p_roll.add_argument("--image-index", type=int, default=0,
                        help="index into the test image file")
    p_roll.add_argument("--image-file", help="IDX image file (index applies)")
    p_roll.add_argument("--steps", type=int, default=60)
    p_roll.add_argument("--channel-map", default="first3",
                        choices=["first3", "pca3", "single"])
    p_roll.add_argument("--channel", type=int, default=0)
    p_roll.add_argument("--normalization", default="fixed",
                        choices=["fixed", "minmax"])
    _add_config_flags(p_roll)

    p_crop = sub.add_parser("crop-eval", help="evaluate on cropped inputs")
    p_crop.add_argument("checkpoint")
    p_crop.add_argument("--top", type=int, default=0)
    p_crop.add_argument("--left", type=int, default=0)
    p_crop.add_argument("--height", type=int, required=True)
    p_crop.add_argument("--width", type=int, required=True)
    p_crop.add_argument("--frames-out", help="also render the first item's "
                        "equilibrium state to this PPM file")
    _add_config_flags(p_crop)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p_gc.add_argument("--seeds", type=int, default=3, help="number of seeds")
    p_gc.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p_gc.add_argument("--corrupt-vjp", action="store_true",
                      help=argparse.SUPPRESS)  # harness sensitivity hook
    return parser


def cmd_train(args):
    cfg = _build_config(args)
    result = train(cfg, progress=lambda row: print(
        f"epoch {row['epoch']:3d}  loss {row['train_loss']:.4f}  "
        f"test acc {row['test_accuracy']:.4f}  "
        f"iters {row['mean_forward_iters']:.1f}  "
        f"unconverged {row['unconverged_solves']}"))
    print(f"final checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _build_config(args).resolve_paths()
    ckpt = load_checkpoint(args.checkpoint)
    test_ds = MnistDataset.load(cfg.test_images, cfg.test_labels).subset(cfg.test_limit)
    stats = evaluate(ckpt.params, test_ds, cfg.eval_solver_cfg(), seed=cfg.seed)
    print(f"accuracy: {stats.accuracy:.4f} on {stats.count} images "
          f"(checkpoint reports {ckpt.accuracy:.4f})")
    print(f"mean solver iterations: {stats.mean_iterations:.2f}")
    print(f"final residual: mean {stats.mean_final_residual:.3e}, "
          f"max {stats.max_final_residual:.3e}")
    return EXIT_OK


def cmd_rollout(args):
    cfg = _build_config(args).resolve_paths()
    ckpt = load_checkpoint(args.checkpoint)
    params = ckpt.params
    image_path = args.image_file or cfg.test_images
    images = load_idx_images(image_path)
    if not 0 <= args.image_index < images.shape[0]:
        raise IdxFormatError(f"image index {args.image_index} out of range "
                             f"[0,{images.shape[0]})")
    x = images[args.image_index:args.image_index + 1]
    os.makedirs(cfg.out_dir, exist_ok=True)

    spec = FrameSpec(channel_map=args.channel_map, channel=args.channel,
                     normalization=args.normalization)
    rng = np.random.default_rng(cfg.seed)
    z0 = rng.standard_normal((1, params.cz, x.shape[2], x.shape[3]))
    ctx = EquilibriumContext(encode(params, x), cfg.eval_solver_cfg(),
                             cfg.backward_cfg())
    f = equilibrium_fn(params)

    write_ppm(os.path.join(cfg.out_dir, "frame_0000.ppm"), render_frame(z0, spec))
    residuals = []

    def observer(step, z, residual):
        write_ppm(os.path.join(cfg.out_dir, f"frame_{step:04d}.ppm"),
                  render_frame(z, spec))
        residuals.append(residual)

    try:
        rollout = nca_rollout(f, ctx, z0, args.steps, observer=observer,
                              keep_states=False)
    except RolloutError as exc:
        # Keep the frames emitted so far and the partial residual trace.
        write_csv_residuals(os.path.join(cfg.out_dir, "residuals.csv"), residuals)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    write_csv_residuals(os.path.join(cfg.out_dir, "residuals.csv"),
                        rollout.residual_trace)
    logits = readout(params, ops.global_avg_pool(rollout.final_state))
    print(f"predicted label: {int(np.argmax(logits[0]))}")
    print(f"final relative residual: {rollout.residual_trace[-1]:.3e}")
    print(f"frames and residuals.csv written to {cfg.out_dir}")
    return EXIT_OK


def cmd_crop_eval(args):
    cfg = _build_config(args).resolve_paths()
    ckpt = load_checkpoint(args.checkpoint)
    test_ds = MnistDataset.load(cfg.test_images, cfg.test_labels).subset(cfg.test_limit)
    cropped = MnistDataset(
        crop(test_ds.images, args.top, args.left, args.height, args.width),
        test_ds.labels)
    stats = evaluate(ckpt.params, cropped, cfg.eval_solver_cfg(), seed=cfg.seed)
    print(f"crop (top={args.top}, left={args.left}, "
          f"{args.height}x{args.width}): accuracy {stats.accuracy:.4f} "
          f"on {stats.count} images")
    print("confusion matrix (rows = true label, cols = predicted):")
    for row in stats.confusion:
        print("  " + " ".join(f"{v:5d}" for v in row))
    if args.frames_out:
        rng = np.random.default_rng(cfg.seed)
        x = cropped.images[:1]
        z0 = rng.standard_normal((1, ckpt.params.cz, x.shape[2], x.shape[3]))
        from .model import solve_states
        z_star, _, _, _ = solve_states(ckpt.params, x, cfg.eval_solver_cfg(), z0=z0)
        write_ppm(args.frames_out, render_frame(z_star, FrameSpec()))
        print(f"equilibrium-state frame written to {args.frames_out}")
    return EXIT_OK


def cmd_gradcheck(args):
    ok = run_report(seeds=range(args.seeds), tolerance=args.tolerance,
                    corrupt_vjp=args.corrupt_vjp)
    if not ok:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERICAL
    print("gradient check passed")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "crop-eval": cmd_crop_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, IdxFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, DivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
