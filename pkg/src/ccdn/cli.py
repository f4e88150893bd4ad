"""``ccdn`` command line: generate, train, detect, eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import datagen
from .evaluation import (
    DatasetError,
    compute_metrics,
    load_external_dataset,
    match,
    per_image_csv,
)
from .imageio import ImageFormatError, read_image, write_overlay
from .model import WeightsFormatError, init_params, load_weights, save_weights
from .postprocess import DetectOptions, detect, read_detections, write_detections
from .training import EpochRecord, TrainConfig, train

log = logging.getLogger("ccdn")


class CliError(Exception):
    pass


def _size(text: str):
    if text.lower() == "none":
        return None
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return (w, h)


def _range(text: str):
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LOW,HIGH, got {text!r}") from None
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or parts[0] > parts[1]:
        raise argparse.ArgumentTypeError(f"expected LOW,HIGH with LOW <= HIGH, got {text!r}")
    return tuple(parts)


def _boards(text: str):
    try:
        return [datagen.BoardSpec.parse(b) for b in text.split(",") if b]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _rotations(text: str):
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected angles like 0,90,180,270, got {text!r}") from None
    if not values or not set(values) <= {0, 90, 180, 270}:
        raise argparse.ArgumentTypeError("rotations must be drawn from 0,90,180,270")
    return values


def _ensure_writable_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory {path} is not writable: {exc}") from None


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# --- generate -----------------------------------------------------------------------

def cmd_generate(args) -> int:
    out = Path(args.out)
    _ensure_writable_dir(out)
    augment = datagen.AugmentConfig(
        rotation_choices=args.rotations,
        invert_probability=args.invert_prob,
        k1_range=args.k1, k2_range=args.k2, p1_range=args.p1, p2_range=args.p2,
        noise_sigma_range=args.noise,
        resize_to=args.resize,
        seed=args.seed,
    )
    try:
        manifest = datagen.generate_dataset(
            args.boards, args.count, out, augment, canvas=args.canvas,
            train_fraction=args.train_fraction, image_format=args.format)
    except OSError as exc:
        raise CliError(f"{exc} (output in {out} is incomplete)") from None
    _write_json(out / "run_config.json", {
        "command": "generate",
        "boards": [b.name for b in args.boards],
        "count": args.count,
        "canvas": list(args.canvas),
        "train_fraction": args.train_fraction,
        "format": args.format,
        "augment": asdict(augment),
    })
    print(f"wrote {out / 'manifest.json'}: {manifest['count']} samples "
          f"({manifest['n_train']} train, {manifest['n_val']} val)")
    return 0


# --- train --------------------------------------------------------------------------

def load_training_pairs(root, split: str):
    """``(image, LabelMap)`` pairs for one split of a generated dataset."""
    try:
        samples = load_external_dataset(root, split=split)
    except (DatasetError, OSError) as exc:
        raise CliError(str(exc)) from None
    pairs = []
    for s in samples:
        try:
            image = read_image(s.image_path)
            labels = datagen.make_label_map(s.corners, (image.shape[1], image.shape[0]))
        except (ValueError, OSError) as exc:
            raise CliError(f"sample {s.name}: {exc}") from None
        if labels.n_positive == 0:
            raise CliError(f"sample {s.name}: no ground-truth corners")
        pairs.append((image, labels))
    return pairs


def cmd_train(args) -> int:
    config = TrainConfig(
        initial_lr=args.lr, decay_rate=args.decay, batch_size=args.batch_size,
        momentum=args.momentum, reg_lambda=args.reg_lambda, epochs=args.epochs,
        seed=args.seed, loss=args.loss, grad_clip=args.grad_clip)
    out = Path(args.out)
    _ensure_writable_dir(out.parent)
    log_path = Path(args.log) if args.log else out.with_suffix(".log")
    train_set = load_training_pairs(args.data, "train")
    val_set = load_training_pairs(args.data, "val")
    if not train_set:
        raise CliError(f"{args.data}: no training samples")
    params = load_weights(args.init) if args.init else None

    with open(log_path, "w") as fh:
        def on_epoch(record: EpochRecord) -> None:
            fh.write(record.format() + "\n")
            fh.flush()
            if not args.quiet:
                print(record.format())

        params, _ = train(train_set, config, val_set, params=params, on_epoch=on_epoch)
    save_weights(params, out)
    _write_json(out.with_suffix(".config.json"), {
        "command": "train", "data": str(args.data), "init": args.init,
        "train_samples": len(train_set), "val_samples": len(val_set), **asdict(config)})
    print(f"wrote {out} and {log_path}")
    return 0


# --- detect -------------------------------------------------------------------------

def _detect_options(args) -> DetectOptions:
    return DetectOptions(threshold=not args.no_threshold, nms=not args.no_nms,
                         cluster=not args.no_cluster, k=args.k, seed=args.seed)


def _image_paths(items):
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(q for q in p.rglob("*") if q.suffix.lower() in (".pgm", ".png")))
        else:
            paths.append(p)
    return paths


def cmd_detect(args) -> int:
    try:
        params = load_weights(args.weights)
    except (WeightsFormatError, OSError) as exc:
        raise CliError(f"{args.weights}: {exc}") from None
    out = Path(args.out)
    _ensure_writable_dir(out)
    options = _detect_options(args)
    failures = 0
    paths = _image_paths(args.images)
    for path in paths:
        try:
            image = read_image(path)
        except (OSError, ImageFormatError, ValueError) as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        found = detect(image, params, options)
        write_detections(out / f"{path.stem}.csv", found)
        if args.overlay:
            write_overlay(out / f"{path.stem}.overlay.ppm", image, [(d.x, d.y) for d in found])
        if not args.quiet:
            print(f"{path}: {len(found)} corners")
    _write_json(out / "run_config.json", {
        "command": "detect", "weights": str(args.weights),
        "images": [str(p) for p in paths], **asdict(options)})
    return 1 if failures else 0


# --- eval ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    if (args.weights is None) == (args.detections is None):
        raise CliError("eval needs exactly one of --weights or --detections")
    try:
        samples = load_external_dataset(args.data, split=args.split)
    except (DatasetError, OSError) as exc:
        raise CliError(str(exc)) from None
    if not samples:
        raise CliError(f"{args.data}: no samples" + (f" in split {args.split!r}" if args.split else ""))
    params = None
    if args.weights:
        try:
            params = load_weights(args.weights)
        except (WeightsFormatError, OSError) as exc:
            raise CliError(f"{args.weights}: {exc}") from None
    options = _detect_options(args)
    results = []
    for s in samples:
        if params is not None:
            found = detect(s.load_image(), params, options)
        else:
            det_path = Path(args.detections) / f"{s.name}.csv"
            if not det_path.is_file():
                raise CliError(f"no detection file for image {s.name} ({det_path})")
            found = read_detections(det_path)
        results.append(match(found, s.corners))
    report = compute_metrics(results)
    out = Path(args.out)
    _ensure_writable_dir(out.parent)
    out.write_text(report.to_csv())
    per_image = Path(args.per_image) if args.per_image else out.with_suffix(".per_image.csv")
    per_image.write_text(per_image_csv([s.name for s in samples], results))
    _write_json(out.with_suffix(".config.json"), {
        "command": "eval", "data": str(args.data), "split": args.split,
        "weights": args.weights, "detections": args.detections, **asdict(options)})
    print(report.to_csv(), end="")
    return 0


# --- parser -------------------------------------------------------------------------

def _add_detect_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-threshold", action="store_true", help="skip the half-of-max threshold")
    p.add_argument("--no-nms", action="store_true", help="skip non-maximum suppression")
    p.add_argument("--no-cluster", action="store_true", help="skip k-means cluster pruning")
    p.add_argument("--k", type=int, default=10, help="number of k-means clusters (default 10)")
    p.add_argument("--seed", type=int, default=0, help="k-means seeding seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccdn", description="Checkerboard corner detection network.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic labelled dataset")
    g.add_argument("--boards", type=_boards, default=_boards(",".join(datagen.BOARD_PRESETS)),
                   help="comma separated inner-corner grids, e.g. 7x7,6x9 (default: all presets)")
    g.add_argument("--count", type=int, required=True, help="number of images")
    g.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--canvas", type=_size, default=(640, 480), help="render size WxH (default 640x480)")
    g.add_argument("--resize", type=_size, default=(640, 480),
                   help="final size WxH or 'none' (default 640x480)")
    g.add_argument("--rotations", type=_rotations, default=(0, 90, 180, 270),
                   help="allowed rotations (default 0,90,180,270)")
    g.add_argument("--invert-prob", type=float, default=0.5, help="intensity inversion probability")
    g.add_argument("--k1", type=_range, default=(-0.4, 0.4), help="radial k1 range LOW,HIGH")
    g.add_argument("--k2", type=_range, default=(-0.1, 0.1), help="radial k2 range LOW,HIGH")
    g.add_argument("--p1", type=_range, default=(-0.01, 0.01), help="tangential p1 range LOW,HIGH")
    g.add_argument("--p2", type=_range, default=(-0.01, 0.01), help="tangential p2 range LOW,HIGH")
    g.add_argument("--noise", type=_range, default=(0.0, 0.04),
                   help="Gaussian noise sigma range, fraction of full scale")
    g.add_argument("--train-fraction", type=float, default=datagen.DEFAULT_TRAIN_FRACTION,
                   help="share of samples in the train split (default 8000/8900)")
    g.add_argument("--format", choices=("pgm", "png"), default="pgm", help="image file format")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train CCDN on a generated dataset")
    t.add_argument("--data", required=True, help="dataset directory (with manifest.json)")
    t.add_argument("--out", required=True, help="weights file to write")
    t.add_argument("--log", help="training log path (default: OUT with .log suffix)")
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--lr", type=float, default=0.01, help="initial learning rate")
    t.add_argument("--decay", type=float, default=0.95, help="decay per epoch of iterations")
    t.add_argument("--batch-size", type=int, default=20)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--lambda", dest="reg_lambda", type=float, default=0.01,
                   help="L2 regularization weight")
    t.add_argument("--grad-clip", type=float, default=None,
                   help="clip the batch gradient to this global L2 norm")
    t.add_argument("--loss", choices=("ce", "mse"), default="ce")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--init", help="start from these weights instead of a fresh initialization")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="detect corners in images")
    d.add_argument("--weights", required=True)
    d.add_argument("images", nargs="+", help="image files or directories")
    d.add_argument("--out", required=True, help="directory for corner files")
    d.add_argument("--overlay", action="store_true", help="also write PPM overlays")
    d.add_argument("--quiet", action="store_true")
    _add_detect_flags(d)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="score detections against ground truth")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", help="only evaluate this manifest split (e.g. val)")
    e.add_argument("--weights", help="run detection with these weights")
    e.add_argument("--detections", help="directory of precomputed <image>.csv detection files")
    e.add_argument("--out", required=True, help="report CSV to write")
    e.add_argument("--per-image", help="per-image breakdown CSV")
    _add_detect_flags(e)
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
