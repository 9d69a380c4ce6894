"""Command-line front end: synth, train, eval, infer and gradcheck.

Every flag can also be set in a plain-text config file passed with
``--config``; one ``key = value`` per line, keys spelled like the long flag
without the leading dashes (``batch-size`` or ``batch_size``). Precedence is
built-in defaults < config file < command line.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Logs go to stderr,
CSV and summaries to stdout.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import io as aio
from .datagen import (AnnotatedFrame, BBox, ManifestError, SynthParams, bin_distance, build_mask, center_crop,
                      frame_rng, load_manifest, resolve_image_path, synth_scene, write_manifest)
from .losses import LOSS_NAMES, LossWeights
from .metrics import AGGREGATORS, SlidingWindowCfg, sliding_window_classes
from .model import LARGE_PRESET, unet_forward
from .numcore import ShapeError, no_grad
from .pipeline import EpochLog, NonFiniteLoss, TrainConfig, evaluate_samples, predict, prepare_sample, train
from .verify import run_suite

log = logging.getLogger("aerodepth")

REQUIRED = {
    "synth": ("out",),
    "train": ("manifest", "out"),
    "eval": ("manifest",),
    "infer": ("ckpt", "image", "out"),
    "gradcheck": (),
}


class UsageError(Exception):
    pass


def _csv_floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_names(text: str) -> List[str]:
    names = [v.strip() for v in text.split(",") if v.strip()]
    if not names:
        raise argparse.ArgumentTypeError("loss list is empty")
    bad = [n for n in names if n not in LOSS_NAMES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown losses {bad}; choose from {','.join(LOSS_NAMES)}")
    return names


def _bbox(text: str) -> BBox:
    try:
        x, y, w, h = (int(v) for v in text.split(","))
        return BBox(x, y, w, h)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bbox must be x,y,w,h with positive w,h: {exc}") from None


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _non_negative_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags given on the command line win")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--workers", type=_positive_int, default=1,
                        help="threads for image loading; results do not depend on it")

    parser = argparse.ArgumentParser(prog="aerodepth", description="Monocular depth-class masks for airborne objects.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset and manifest")
    d = SynthParams()
    p.add_argument("--out", help="output directory")
    p.add_argument("--frames", type=_non_negative_int, default=100)
    p.add_argument("--start", type=_non_negative_int, default=0, help="index of the first frame")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=d.image_size, help="square image side in pixels")
    p.add_argument("--focal", type=float, default=d.focal_px, help="focal length in pixels")
    p.add_argument("--wingspan", type=float, default=d.wingspan_m, help="object width in metres")
    p.add_argument("--min-distance", type=float, default=d.distance_range_m[0])
    p.add_argument("--max-distance", type=float, default=d.distance_range_m[1])
    p.add_argument("--noise", type=float, default=d.noise_std)
    p.add_argument("--aspect", type=float, default=d.aspect, help="silhouette height / width")
    p.add_argument("--write-masks", action="store_true", help="also write full-frame class masks")

    t = TrainConfig()
    p = sub.add_parser("train", parents=[common], help="train a model from a manifest")
    p.add_argument("--manifest")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--epochs", type=_non_negative_int, default=t.epochs)
    p.add_argument("--crop", type=_positive_int, default=128)
    p.add_argument("--loss", type=_csv_names, default=list(LOSS_NAMES))
    p.add_argument("--weights", type=_csv_floats, default=None, help="one weight per --loss entry")
    p.add_argument("--lr", type=float, default=t.lr)
    p.add_argument("--weight-decay", type=float, default=t.weight_decay)
    p.add_argument("--batch-size", type=_positive_int, default=t.batch_size)
    p.add_argument("--c-frac", type=float, default=t.c_frac, help="BerHu threshold as a fraction of max error")
    p.add_argument("--sigma", type=float, default=2.0, help="Gaussian smoothing of the target mask")
    p.add_argument("--ksize", type=_positive_int, default=9)
    p.add_argument("--levels", type=_positive_int, default=t.levels)
    p.add_argument("--base-channels", type=_positive_int, default=t.base_channels)
    p.add_argument("--large", action="store_true",
                   help=f"use the larger preset (levels {LARGE_PRESET['levels']}, base {LARGE_PRESET['base_channels']})")
    p.add_argument("--seed", type=int, default=t.seed)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or saved predictions")
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--report", help="write the metric CSV here instead of stdout")
    p.add_argument("--window", type=_positive_int, default=5)
    p.add_argument("--threshold", type=float, default=1.25)
    p.add_argument("--crop", type=_positive_int, default=128)
    p.add_argument("--batch-size", type=_positive_int, default=8)
    p.add_argument("--predictions", help="directory of <frame_id>.pfm maps used instead of the model")
    p.add_argument("--dump-masks", help="write predicted maps as <frame_id>.pfm")
    p.add_argument("--dump-targets", help="write ground-truth class masks as <frame_id>.pfm")

    p = sub.add_parser("infer", parents=[common], help="predict a mask for one image")
    p.add_argument("--ckpt")
    p.add_argument("--image")
    p.add_argument("--out", help="output float map (.pfm)")
    p.add_argument("--bbox", type=_bbox, help="x,y,w,h in image coordinates")
    p.add_argument("--crop", type=_positive_int, help="centre-crop this size around --bbox first")
    p.add_argument("--window", type=_positive_int, default=5)

    p = sub.add_parser("gradcheck", parents=[common], help="run the finite-difference suite")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--trials", type=_positive_int, default=10)
    return parser


def read_config(path: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _config_path(argv: Sequence[str]) -> Optional[str]:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(sub: argparse.ArgumentParser, values: Dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} expects true/false, got {raw!r}")
            defaults[key] = low in ("true", "1", "yes")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r}: {raw!r} not in {list(action.choices)}")
        defaults[key] = value
    sub.set_defaults(**defaults)


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    path = _config_path(argv)
    if path is not None and argv and not argv[0].startswith("-"):
        subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        sub = subparsers.choices.get(argv[0])
        if sub is not None:
            try:
                _apply_config(sub, read_config(path))
            except OSError as exc:
                sub.error(f"cannot read config: {exc}")
            except UsageError as exc:
                sub.error(str(exc))
    args = parser.parse_args(argv)
    missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if getattr(args, k) is None]
    if args.command == "eval" and args.ckpt is None and args.predictions is None:
        missing.append("--ckpt or --predictions")
    if missing:
        subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        subparsers.choices[args.command].error(f"the following arguments are required: {', '.join(missing)}")
    return args


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _histogram(classes: Sequence[int]) -> str:
    counts = np.bincount(np.asarray(classes, dtype=np.int64), minlength=5)
    return ",".join(f"{c}:{n}" for c, n in enumerate(counts))


def cmd_synth(args) -> int:
    params = SynthParams(focal_px=args.focal, wingspan_m=args.wingspan, image_size=args.size,
                         distance_range_m=(args.min_distance, args.max_distance), noise_std=args.noise,
                         seed=args.seed, aspect=args.aspect)
    try:
        params.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    if args.write_masks:
        os.makedirs(os.path.join(args.out, "masks"), exist_ok=True)

    def one(i):
        fid = f"f{i:06d}"
        img, frame = synth_scene(params, frame_rng(params.seed, i), frame_id=fid, image_path=f"images/{fid}.pgm")
        aio.write_image(img, os.path.join(args.out, frame.image_path))
        if args.write_masks:
            aio.write_class_mask(build_mask(frame, img.shape), os.path.join(args.out, "masks", f"{fid}.pgm"))
        return frame

    indices = range(args.start, args.start + args.frames)
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        frames = list(pool.map(one, indices))
    write_manifest(frames, os.path.join(args.out, "manifest.tsv"))
    log.info("wrote %d frames to %s", len(frames), args.out)
    print(f"frames={len(frames)} classes={_histogram([bin_distance(f.distance_m) for f in frames])}")
    return 0


def _load_samples(manifest: str, crop: int, workers: int, sigma: float = 2.0, ksize: int = 9):
    frames = load_manifest(manifest)

    def one(frame: AnnotatedFrame):
        return prepare_sample(aio.read_image(resolve_image_path(frame, manifest)), frame, crop, sigma, ksize)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, frames))


def train_config(args) -> TrainConfig:
    try:
        weights = LossWeights.from_selection(args.loss, args.weights)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    levels, base = args.levels, args.base_channels
    if args.large:
        levels, base = LARGE_PRESET["levels"], LARGE_PRESET["base_channels"]
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, weight_decay=args.weight_decay,
                       weights=weights, c_frac=args.c_frac, seed=args.seed, levels=levels, base_channels=base)


def cmd_train(args) -> int:
    cfg = train_config(args)
    if args.crop % (2 ** cfg.levels):
        raise UsageError(f"--crop {args.crop} must be divisible by 2^levels = {2 ** cfg.levels}")
    samples = _load_samples(args.manifest, args.crop, args.workers, args.sigma, args.ksize)
    log.info("loaded %d samples from %s", len(samples), args.manifest)
    print(EpochLog.HEADER, flush=True)
    model, state, _ = train(samples, cfg, on_epoch=lambda e: print(e.csv(), flush=True))
    aio.save_checkpoint(model, args.out, state)
    log.info("checkpoint written to %s", args.out)
    return 0


def _pfm_path(directory: str, frame_id: str) -> str:
    return os.path.join(directory, f"{frame_id}.pfm")


def cmd_eval(args) -> int:
    samples = _load_samples(args.manifest, args.crop, args.workers)
    if not samples:
        raise ValueError(f"manifest {args.manifest} lists no frames")
    if args.predictions:
        maps = [aio.read_float_map(_pfm_path(args.predictions, s.frame_id)) for s in samples]
    else:
        model, _ = aio.load_checkpoint(args.ckpt)
        maps = predict(model, [s.image for s in samples], args.batch_size)
    for directory, arrays in ((args.dump_masks, maps), (args.dump_targets, [s.class_mask for s in samples])):
        if directory:
            os.makedirs(directory, exist_ok=True)
            for s, arr in zip(samples, arrays):
                aio.write_float_map(arr, _pfm_path(directory, s.frame_id))
    report = evaluate_samples(maps, samples, args.window, args.threshold)
    print(f"samples {report.n_samples}: MAE {report.mae:.4f}  RMSE {report.rmse:.4f}  "
          f"sliding-window mean/min/max {report.sw_acc_mean:.3f}/{report.sw_acc_min:.3f}/{report.sw_acc_max:.3f}  "
          f"threshold {report.threshold_acc:.3f}")
    if args.report:
        aio.write_report(report, args.report)
        log.info("report written to %s", args.report)
    else:
        sys.stdout.write(aio.report_csv(report))
    return 0


def cmd_infer(args) -> int:
    model, _ = aio.load_checkpoint(args.ckpt)
    img = aio.read_image(args.image).mean(axis=0)
    bbox = args.bbox
    if args.crop is not None:
        if bbox is None:
            raise UsageError("--crop needs --bbox to place the crop")
        img, _, bbox = center_crop(img, None, bbox, args.crop)
    with no_grad():
        out = unet_forward(model, img[None, None]).data[0, 0]
    aio.write_float_map(out, args.out)
    if bbox is not None:
        if bbox.clip(*out.shape) is None:
            raise ValueError(f"bbox {bbox} lies outside the {out.shape} prediction")
        classes = sliding_window_classes(out, bbox, SlidingWindowCfg(k=args.window))
        print(" ".join(f"{agg}={classes[agg]}" for agg in AGGREGATORS))
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed, args.trials)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error("gradient check failed for: %s", ", ".join(failed))
        return 1
    return 0


def _setup_logging(level: str) -> None:
    # a fresh handler per call so repeated in-process runs log to the current stderr
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        log.error("%s", exc)
        return 2
    except NonFiniteLoss as exc:
        log.error("%s", exc)
        return 1
    except (OSError, ValueError, ShapeError, ManifestError, aio.FormatError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
