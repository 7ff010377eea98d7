"""Command-line entry point: ``crcnn <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence
(including a failed gradient check). Diagnostics are one line on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np
import tomli
from threadpoolctl import threadpool_limits

from . import data, evaluation, gradcheck, synthetic
from .checkpoint import load_checkpoint
from .dataset import find_videos, open_video
from .errors import (
    CheckpointFormatError,
    DataError,
    DivergenceError,
    InvalidMaskError,
    ShapeError,
    UndefinedMetricsError,
)
from .imageio import write_image
from .model import build_bcnn, build_scnn, count_parameters
from .training import TrainConfig, train_cascade

DATA_ROOT_ENV = "CRCNN_DATA_ROOT"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# parser


def _add_globals(p, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=d(0), help="seed for every random choice (default 0)")
    g.add_argument("--config", type=Path, default=d(None),
                   help="TOML file of key = value settings; its values override flags")
    g.add_argument("--threads", type=int, default=d(None),
                   help="upper bound on numeric worker threads")
    g.add_argument("--deterministic", action="store_true", default=d(False),
                   help="single-threaded numerics and timing-free reports")
    g.add_argument("--verbose", action="store_true", default=d(False), help="log progress to stderr")


def _frames_arg(text: str):
    try:
        lo, hi = (int(v) if v else None for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected FIRST:LAST frame numbers, got {text!r}") from None
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crcnn", description="Cascade-residual CNN video foreground segmentation.")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_globals(p, suppress=True)
        return p

    data_help = f"video directory (default: ${DATA_ROOT_ENV})"

    p = command("synth", "write a seeded synthetic video in the CD2014 layout")
    p.add_argument("--out", type=Path, required=True, help="output video directory")
    p.add_argument("--frames", type=int, default=120, help="number of frames (default 120)")
    p.add_argument("--width", type=int, default=64, help="frame width (default 64)")
    p.add_argument("--height", type=int, default=64, help="frame height (default 64)")
    p.add_argument("--background", choices=("static", "textured", "dynamic_noise"),
                   default="textured", help="background kind (default textured)")
    p.add_argument("--noise-sigma", type=float, default=0.0,
                   help="per-frame noise in gray levels for dynamic_noise")
    p.add_argument("--objects", type=int, default=1, help="number of moving objects (default 1)")
    p.add_argument("--object-size", type=int, default=10, help="object side or diameter (default 10)")
    p.add_argument("--object-shape", choices=("rect", "disc"), default="rect", help="object shape")
    p.add_argument("--intensity", type=int, default=230, help="object gray level (default 230)")
    p.add_argument("--shadow", action="store_true", help="objects cast labelled shadows")
    p.add_argument("--jitter", type=int, default=0, help="camera jitter amplitude in pixels")
    p.add_argument("--drift", type=float, default=0.0, help="illumination drift per frame")
    p.add_argument("--format", choices=("png", "pgm"), default="png", help="image format")

    p = command("background", "median background of the first frames")
    p.add_argument("--data", type=Path, help=data_help)
    p.add_argument("--first-n", type=int, default=100, help="frames in the median (default 100)")
    p.add_argument("--out", type=Path, default=Path("background.pgm"),
                   help="output image (default ./background.pgm)")

    p = command("train", "train BCNN then SCNN on one video")
    p.add_argument("--data", type=Path, help=data_help)
    p.add_argument("--out", type=Path, required=True, help="model directory")
    p.add_argument("--first-n", type=int, default=100,
                   help="frames in the median background (default 100)")
    p.add_argument("--train-frames", type=int, default=None,
                   help="cap on annotated training frames (default all)")
    p.add_argument("--background-image", type=Path, default=None,
                   help="use this background image instead of a median")
    p.add_argument("--patch-size", type=int, default=48, help="patch side, at most 50 (default 48)")
    p.add_argument("--overlap", type=float, default=0.5, help="patch overlap in [0.5, 0.75]")
    p.add_argument("--lr", type=float, default=1e-3, help="initial learning rate (default 1e-3)")
    p.add_argument("--max-epochs", type=int, default=50, help="epoch cap per network (default 50)")
    p.add_argument("--batch-size", type=int, default=128, help="patches per batch (default 128)")
    p.add_argument("--train-fraction", type=float, default=0.8,
                   help="training share of the patches (default 0.8)")
    p.add_argument("--patience", type=int, default=3, help="plateau patience in epochs (default 3)")
    p.add_argument("--plateau-factor", type=float, default=0.1, help="LR decay factor (default 0.1)")
    p.add_argument("--early-stop-delta", type=float, default=1e-5,
                   help="minimum validation improvement (default 1e-5)")
    p.add_argument("--min-lr", type=float, default=1e-6,
                   help="LR below which a plateau stops training (default 1e-6)")
    p.add_argument("--threshold", type=float, default=0.8,
                   help="segmentation threshold stored with the model (default 0.8)")
    p.add_argument("--width", type=int, default=64, help="hidden channels (non-canonical if not 64)")
    p.add_argument("--depth", type=int, default=15, help="middle layers (non-canonical if not 15)")
    p.add_argument("--scnn-batchnorm", action="store_true",
                   help="batch norm in SCNN middle layers (non-canonical)")
    p.add_argument("--resume", action="store_true", help="reuse an existing bcnn.ckpt in --out")

    p = command("segment", "write binary foreground masks for a video")
    p.add_argument("--data", type=Path, help=data_help)
    p.add_argument("--models", type=Path, required=True, help="directory with bcnn.ckpt and scnn.ckpt")
    p.add_argument("--out", type=Path, required=True, help="mask output directory")
    p.add_argument("--threshold", type=float, default=evaluation.DEFAULT_THRESHOLD,
                   help="foreground probability threshold (default 0.8)")
    p.add_argument("--frames", type=_frames_arg, default=None,
                   help="FIRST:LAST frame numbers, inclusive (default all)")
    p.add_argument("--format", choices=("png", "pgm"), default="png", help="mask format")
    p.add_argument("--patch-inference", type=int, default=None, metavar="SIZE",
                   help="average overlapping SIZE patches instead of whole frames")

    p = command("evaluate", "score segmentations against ground truth")
    p.add_argument("--data", type=Path, help=f"video or dataset tree (default: ${DATA_ROOT_ENV})")
    p.add_argument("--models", type=Path, required=True,
                   help="model directory, or a tree mirroring the dataset")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.add_argument("--threshold", type=float, default=evaluation.DEFAULT_THRESHOLD,
                   help="foreground probability threshold (default 0.8)")
    p.add_argument("--frames", type=_frames_arg, default=None,
                   help="FIRST:LAST frame numbers (default: scored frames not used in training)")
    p.add_argument("--method", default="CRCNN", help="method name in summary.csv")
    p.add_argument("--patch-inference", type=int, default=None, metavar="SIZE",
                   help="average overlapping SIZE patches instead of whole frames")
    p.add_argument("--save-masks", action="store_true", help="also write masks under --out")

    p = command("params", "print trainable parameter counts")
    p.add_argument("--scnn-batchnorm", action="store_true", help="count the batch-norm SCNN variant")

    p = command("gradcheck", "finite-difference check of every gradient")
    p.add_argument("--size", type=int, default=6, help="spatial size of the network inputs (default 6)")
    p.add_argument("--samples", type=int, default=3, help="entries checked per tensor (default 3)")
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _dests(p) -> dict:
    return {a.dest: a for a in p._actions if a.dest not in ("help", argparse.SUPPRESS)}


def apply_config(parser, args) -> None:
    """Override parsed flags with values from ``--config``.

    Top-level keys and keys in a ``[<subcommand>]`` table are accepted; keys
    use flag names (dashes or underscores). Top-level keys belonging only to
    other subcommands are ignored; anything else is a usage error.
    """
    if args.config is None:
        return
    try:
        with open(args.config, "rb") as fh:
            table = tomli.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {args.config}: {exc.strerror}") from None
    except tomli.TOMLDecodeError as exc:
        raise UsageError(f"malformed config {args.config}: {exc}") from None

    sub = _subparser(parser, args.command)
    known = _dests(sub)
    everywhere = set()
    for p in {id(v): v for v in _subparser_map(parser).values()}.values():
        everywhere |= set(_dests(p))

    values = {k: v for k, v in table.items() if not isinstance(v, dict)}
    section = table.get(args.command, {})
    for name in table:
        if isinstance(table[name], dict) and name not in _subparser_map(parser):
            raise UsageError(f"config: unknown section [{name}]")
    for scope, items in (("top level", values), (f"[{args.command}]", section)):
        for key, value in items.items():
            dest = key.replace("-", "_")
            if dest == "config":
                raise UsageError("config: 'config' cannot be set from a config file")
            if dest not in known:
                if scope == "top level" and dest in everywhere:
                    continue
                raise UsageError(f"config: unknown key {key!r} ({scope})")
            action = known[dest]
            if action.type is not None and not isinstance(value, bool):
                try:
                    value = action.type(str(value)) if action.type is not Path else Path(value)
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    raise UsageError(f"config: bad value for {key!r}: {exc}") from None
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"config: {key!r} must be one of {sorted(action.choices)}")
            setattr(args, dest, value)


def _subparser_map(parser) -> dict:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


# ---------------------------------------------------------------------------
# subcommands


def _data_dir(args) -> Path:
    if args.data is not None:
        return args.data
    env = os.environ.get(DATA_ROOT_ENV)
    if not env:
        raise UsageError(f"--data is required when ${DATA_ROOT_ENV} is unset")
    return Path(env)


def synth_config(args) -> synthetic.SceneConfig:
    """Scene described by ``synth`` flags; the defaults give the acceptance scene."""
    base = synthetic.acceptance_scene(args.seed)
    first = base.objects[0]
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 2]))
    objects = []
    for i in range(args.objects):
        if i == 0:
            start, velocity = first.start, first.velocity
        else:
            start = (int(rng.integers(0, max(args.height - args.object_size, 0) + 1)),
                     int(rng.integers(0, max(args.width - args.object_size, 0) + 1)))
            velocity = tuple(int(v) * int(s) for v, s in
                             zip(rng.integers(1, 4, 2), rng.choice([-1, 1], 2)))
        objects.append(synthetic.SceneObject(
            args.object_shape, args.object_size, start=start, velocity=velocity,
            intensity=args.intensity, cast_shadow=args.shadow))
    return synthetic.SceneConfig(
        width=args.width, height=args.height, frame_count=args.frames, seed=args.seed,
        background_kind=args.background, noise_sigma=args.noise_sigma, objects=objects,
        jitter_amplitude=args.jitter, illumination_drift=args.drift)


def cmd_synth(args) -> int:
    try:
        config = synth_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = synthetic.write_cd2014_layout(synthetic.generate(config), args.out, config,
                                             ext=args.format)
    print(f"wrote {len(manifest['frames'])} frames to {args.out}")
    return EXIT_OK


def cmd_background(args) -> int:
    video = open_video(_data_dir(args))
    if args.first_n < 1:
        raise UsageError("--first-n must be positive")
    if len(video) < args.first_n:
        raise DataError(f"{video.root}: {len(video)} frames, fewer than --first-n {args.first_n}")
    bg = data.compute_background(video.frames(video.numbers[:args.first_n]))
    write_image(args.out, np.clip(np.rint(bg[0, 0] * 255.0), 0, 255).astype(np.uint8))
    print(f"wrote {args.out}")
    return EXIT_OK


def train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr, plateau_factor=args.plateau_factor, plateau_patience=args.patience,
        max_epochs=args.max_epochs, batch_size=args.batch_size, train_fraction=args.train_fraction,
        seed=args.seed, early_stop_delta=args.early_stop_delta, min_learning_rate=args.min_lr,
        patch_size=args.patch_size, overlap=args.overlap, background_frames=args.first_n,
        train_frames=args.train_frames, threshold=args.threshold, width=args.width,
        depth=args.depth, scnn_batchnorm=args.scnn_batchnorm)


def cmd_train(args) -> int:
    try:
        config = train_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = train_cascade(_data_dir(args), config, args.out, background_path=args.background_image,
                           resume=args.resume, timings=not args.deterministic)
    r = result.report
    print(f"bcnn: {r['bcnn']['epochs_run']} epochs, scnn: {r['scnn']['epochs_run']} epochs; "
          f"wrote {result.bcnn_path}, {result.scnn_path}, {result.report_path}")
    return EXIT_OK


def _load_models(models: Path):
    bcnn_path, scnn_path = models / "bcnn.ckpt", models / "scnn.ckpt"
    for p in (bcnn_path, scnn_path):
        if not p.exists():
            raise DataError(f"missing checkpoint {p}")
    bcnn, _, meta = load_checkpoint(bcnn_path)
    scnn, _, _ = load_checkpoint(scnn_path)
    if "mean" not in meta:
        raise CheckpointFormatError(f"{bcnn_path}: no dataset mean in the metadata")
    return bcnn, scnn, meta


def _select(numbers, frames):
    if frames is None:
        return list(numbers)
    lo, hi = frames
    return [n for n in numbers if (lo is None or n >= lo) and (hi is None or n <= hi)]


def _check_threshold(t):
    if not 0.0 < t < 1.0:
        raise UsageError(f"--threshold must lie in (0, 1), got {t}")


def _mask_writer(out_dir: Path, ext: str):
    out_dir.mkdir(parents=True, exist_ok=True)

    def write(number, mask):
        write_image(out_dir / f"bin{number:06d}.{ext}", mask.astype(np.uint8) * 255)

    return write


def cmd_segment(args) -> int:
    _check_threshold(args.threshold)
    video = open_video(_data_dir(args))
    bcnn, scnn, meta = _load_models(args.models)
    numbers = _select(video.numbers, args.frames)
    if not numbers:
        raise DataError("no frames selected")
    write = _mask_writer(args.out, args.format)
    overlap = meta.get("overlap", 0.5)
    for n in numbers:
        probs = evaluation.predict_probabilities(video.frame(n), bcnn, scnn, meta["mean"],
                                                 args.patch_inference, overlap)
        write(n, evaluation.binarize(probs, args.threshold))
    print(f"wrote {len(numbers)} masks to {args.out}")
    return EXIT_OK


def _models_for(models: Path, video, root: Path) -> Path:
    candidates = []
    if video.root != root:
        candidates.append(models / video.root.relative_to(root))
    candidates += [models / video.category / video.name, models / video.name, models]
    for c in candidates:
        if (c / "bcnn.ckpt").exists():
            return c
    raise DataError(f"no checkpoints for {video.category}/{video.name} under {models}")


def cmd_evaluate(args) -> int:
    _check_threshold(args.threshold)
    root = _data_dir(args)
    videos = find_videos(root)
    if not videos:
        raise DataError(f"no video directories under {root}")
    evaluations, results = {}, {}
    for video in videos:
        bcnn, scnn, meta = _load_models(_models_for(args.models, video, root))
        scored = video.scored_numbers()
        if args.frames is None:
            trained = set(meta.get("training_frames", []))
            numbers = [n for n in scored if n not in trained]
        else:
            numbers = _select(scored, args.frames)
        if not numbers:
            raise DataError(f"{video.root}: no scored frames selected")
        key = f"{video.category}/{video.name}"
        on_mask = None
        if args.save_masks:
            on_mask = _mask_writer(args.out / "masks" / video.category / video.name, "png")
        ev = evaluation.evaluate_video(
            video.frames(numbers), video.masks(numbers), bcnn, scnn, meta["mean"],
            args.threshold, numbers, args.patch_inference, meta.get("overlap", 0.5), on_mask)
        evaluations[key] = ev
        results.setdefault(video.category, {})[video.name] = ev.pooled
    tables = evaluation.aggregate(results)
    evaluation.write_reports(args.out, evaluations, tables, args.method,
                             {"threshold": args.threshold})
    o = tables["overall"]
    print(f"overall precision {o['precision']:.4f} recall {o['recall']:.4f} "
          f"F {o['f_measure']:.4f} PWC {o['pwc']:.4f}")
    return EXIT_OK


def cmd_params(args) -> int:
    b = count_parameters(build_bcnn(args.seed))
    s = count_parameters(build_scnn(args.seed, batchnorm=args.scnn_batchnorm))
    print(f"bcnn {b}\nscnn {s}\ntotal {b + s}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.size < 3 or args.samples < 1:
        raise UsageError("--size must be >= 3 and --samples >= 1")
    suite = gradcheck.Suite(gradcheck.check_operations(args.seed)
                            + gradcheck.check_networks(args.seed, args.size, args.samples))
    for r in suite.results:
        extra = f" zero-grad {r.zero_grad_max:.2e}" if r.zero_grad_max is not None else ""
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<20} max rel err {r.max_error:.3e} "
              f"({r.checked} entries, {r.skipped_kinks} kinks skipped){extra}")
    print(f"max relative error {suite.max_error:.3e}")
    return EXIT_OK if suite.passed else EXIT_DIVERGED


COMMANDS = {
    "synth": cmd_synth, "background": cmd_background, "train": cmd_train,
    "segment": cmd_segment, "evaluate": cmd_evaluate, "params": cmd_params,
    "gradcheck": cmd_gradcheck,
}


def _limits(args):
    if args.deterministic:
        return threadpool_limits(limits=1)
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return threadpool_limits(limits=args.threads)
    return contextlib.nullcontext()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        apply_config(parser, args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        with _limits(args):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointFormatError, InvalidMaskError, ShapeError,
            UndefinedMetricsError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
