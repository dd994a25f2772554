"""``herdsynth`` command line.

Exit status: 0 success, 1 runtime failure, 2 configuration error,
3 missing input from an earlier stage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import PRESETS, load_config
from .errors import ConfigError, MissingStageInput
from .evaluation import evaluate_dataset, write_report
from .fixture import write_fixture
from .pipeline import (
    Context,
    run_pipeline,
    stage_augment,
    stage_compose,
    stage_extract,
    stage_recreate,
    stage_sample,
    stage_train,
    timed,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="YAML config file")
    g.add_argument("--preset", choices=sorted(PRESETS), default="full",
                   help="base parameter set (default: full)")
    g.add_argument("--seed", type=int, help="master seed")
    g.add_argument("--workers", type=int, help="worker processes")
    g.add_argument("--data", type=Path, help="dataset root with images/ and labels/")
    g.add_argument("--out", type=Path, help="output root")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="herdsynth", description="Synthetic aerial livestock dataset builder.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    sub.add_parser("extract", parents=[common], help="split the dataset, cut out sprites, black out boxes")
    sub.add_parser("recreate", parents=[common], help="refill blacked-out regions to make backgrounds")
    sub.add_parser("augment", parents=[common], help="build the augmented sprite bank")
    p = sub.add_parser("train-diffusion", parents=[common], help="train the sprite diffusion model")
    p.add_argument("--resume", action="store_true", help="continue from the saved checkpoint")
    sub.add_parser("sample", parents=[common], help="draw sprites from the trained diffusion model")
    for name, text in (("compose", "render synthetic scenes"), ("pipeline", "run every stage in order")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--count", type=int, help="number of scenes to attempt")
        p.add_argument("--skip-diffusion", action="store_true",
                       help="compose from augmented real sprites only")
    p = sub.add_parser("evaluate", parents=[common], help="score prediction files against ground truth")
    p.add_argument("--pred", type=Path, required=True, help="directory of prediction label files")
    p.add_argument("--gt", type=Path, help="ground-truth label directory (default: the test split)")
    p.add_argument("--kind", choices=("axis", "obb"))
    p.add_argument("--iou", type=float, help="IoU threshold")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    p = sub.add_parser("make-fixture", help="write the small procedural demo dataset")
    p.add_argument("root", type=Path)
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--seed", type=int, default=2024)
    return parser


def _overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["master_seed"] = args.seed
    if args.workers is not None:
        o["workers"] = args.workers
    if args.data is not None:
        o["dataset_root"] = str(args.data)
    if args.out is not None:
        o["output_root"] = str(args.out)
    if getattr(args, "count", None) is not None:
        o["compose"] = {"count": args.count}
    if getattr(args, "iou", None) is not None:
        o.setdefault("evaluate", {})["iou_threshold"] = args.iou
    if getattr(args, "kind", None) is not None:
        o.setdefault("evaluate", {})["kind"] = args.kind
    return o


def _report(msg: str) -> None:
    print(msg, file=sys.stderr)


def _run(args) -> int:
    if args.command == "make-fixture":
        stems = write_fixture(args.root, args.count, args.seed)
        print(f"wrote {len(stems)} images to {args.root}")
        return EXIT_OK

    cfg = load_config(args.config, args.preset, _overrides(args))
    if args.command == "show-config":
        sys.stdout.write(cfg.to_yaml())
        return EXIT_OK
    ctx = Context.from_config(cfg)

    if args.command == "pipeline":
        run_pipeline(ctx, args.skip_diffusion, _report)
        total = sum(t for _, t in ctx.timings)
        _report(f"total: {total:.1f} s")
        return EXIT_OK
    if args.command == "evaluate":
        gt = args.gt or ctx.out / "extract" / "test_labels"
        if not gt.is_dir():
            raise MissingStageInput(f"missing ground-truth labels: {gt}")
        rep = evaluate_dataset(args.pred, gt, cfg.evaluate.kind, cfg.evaluate.iou_threshold)
        write_report(rep, ctx.out / "eval")
        sys.stdout.write(rep.to_text())
        return EXIT_OK

    stages = {
        "extract": lambda: stage_extract(ctx),
        "recreate": lambda: stage_recreate(ctx),
        "augment": lambda: stage_augment(ctx),
        "train-diffusion": lambda: stage_train(ctx, args.resume),
        "sample": lambda: stage_sample(ctx),
        "compose": lambda: stage_compose(ctx, args.skip_diffusion),
    }
    timed(ctx, args.command, stages[args.command], _report)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingStageInput as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic for the shell
        if getattr(args, "verbose", False):
            logging.exception("stage failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
