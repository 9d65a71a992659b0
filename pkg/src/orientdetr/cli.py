"""Command-line entry point: ``orientdetr <subcommand> ...``.

Exit status is 0 on success, 2 on a usage error and 1 on a runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, atomic_write
from .config import load_config
from .data import DataFormatError, gen_dataset, load_dataset, read_image
from .evaluation import EmptyDatasetError
from .geom import GeometryError, OrientedBox, rotated_iou
from .matching import hungarian
from .tensor import no_grad

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_box(text):
    try:
        box = OrientedBox.parse(text)
    except (GeometryError, ValueError) as exc:
        raise UsageError(f"bad box {text!r}: {exc}") from None
    if box.w <= 0 or box.h <= 0:
        raise UsageError(f"bad box {text!r}: sides must be positive")
    return box


def cmd_gen_data(args):
    if args.size % 64:
        raise UsageError(f"--size must be divisible by 64, got {args.size}")
    if args.n < 1:
        raise UsageError("--n must be positive")
    gen_dataset(args.out, args.n, seed=args.seed, size=args.size,
                num_classes=args.classes, workers=args.workers)
    print(f"wrote {args.n} scenes to {args.out}")


def cmd_train(args):
    from .training import train

    try:
        cfg = load_config(args.config)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = train(cfg, resume=args.resume)
    print(f"trained {result.steps_done} steps in {result.elapsed:.1f}s; "
          f"checkpoint at {Path(cfg.out) / 'checkpoint.ao2c'}")
    if result.report is not None:
        print(result.report.format())


def cmd_eval(args):
    from .training import evaluate, load_checkpoint

    model, _, _ = load_checkpoint(args.checkpoint)
    scenes = load_dataset(args.data)
    if not scenes:
        raise UsageError(f"no scenes found in {args.data}")
    report = evaluate(model, scenes, iou_thresh=args.iou)
    print(report.format())


def cmd_iou(args):
    a, b = _parse_box(args.box1), _parse_box(args.box2)
    print(f"{rotated_iou(a, b):.6f}")


def read_cost_matrix(path):
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.replace(",", " ").strip()
        if line and not line.startswith("#"):
            rows.append([float(v) for v in line.split()])
    if not rows or len({len(r) for r in rows}) != 1:
        raise UsageError(f"{path}: expected a non-empty rectangular matrix")
    return np.array(rows)


def cmd_match(args):
    try:
        cost = read_cost_matrix(args.costs)
    except ValueError as exc:
        raise UsageError(f"{args.costs}: {exc}") from None
    try:
        result = hungarian(cost)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print("pairs " + ",".join(f"({r},{c})" for r, c in result.pairs))
    print(f"cost {result.cost:g}")


def format_proposal_lines(output, index=0):
    """One line per query: score, box, then the first layer's sampling points."""
    first = output.layers[0]
    if output.query_scores is not None:
        scores = 1.0 / (1.0 + np.exp(-output.query_scores[index]))
    else:
        scores = (1.0 / (1.0 + np.exp(-first.logits.data[index]))).max(axis=-1)
    boxes = output.query_boxes[index]
    points = first.sampling_locations[index].reshape(len(boxes), -1)
    lines = []
    for s, box, pts in zip(scores, boxes, points):
        values = [s, *box, *pts]
        lines.append(" ".join(f"{v:.6f}" for v in values))
    return lines


def cmd_dump_proposals(args):
    from .training import load_checkpoint
    from .validation import check_images

    model, _, _ = load_checkpoint(args.checkpoint)
    try:
        image = check_images(read_image(args.image))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with no_grad():
        output = model(image)
    lines = format_proposal_lines(output)
    atomic_write(args.out, "".join(line + "\n" for line in lines).encode("utf-8"))
    print(f"wrote {len(lines)} proposals to {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="orientdetr", description="Oriented object detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rotated mAP of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("iou", help="rotated IoU of two boxes 'cx cy w h theta'")
    p.add_argument("box1")
    p.add_argument("box2")
    p.set_defaults(func=cmd_iou)

    p = sub.add_parser("match", help="optimal assignment for a cost matrix file")
    p.add_argument("--costs", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("dump-proposals", help="write query proposals and sampling points")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_proposals)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        args.func(args)
    except (UsageError, EmptyDatasetError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, DataFormatError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
