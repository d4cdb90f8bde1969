"""Command-line entry point: generate, train, eval and report."""

from __future__ import annotations

import argparse
import logging
from collections.abc import Sequence
from pathlib import Path

from .config import CONFIG_KEYS, format_config, load_config
from .const import (
    CHECKPOINT_BEST,
    DEFAULT_INPUT_SIZE,
    DEFAULT_MAP_IOU,
    METHODS_ORDER,
    RECIPE_MINI_MARS,
    REPORT_NAME,
    RUN_CONFIG_NAME,
    SPLIT_SOURCE_TRAIN,
    SPLIT_TARGET_TEST,
    SPLIT_TARGET_TRAIN,
)
from .data import RECIPES, generate_recipe, load_split
from .detector import load_checkpoint
from .evaluation import (
    aggregate_reports,
    evaluate,
    format_report_table,
    load_report,
    save_report,
    write_report_csv,
)
from .exceptions import ConfigError, DatasetIOError, UdaError
from .trainer import train

_LOGGER = logging.getLogger(__name__)

EPILOG = """
Examples:
  # Render the mini-mars dataset with seed 7
  python -m celestial_uda generate --recipe mini-mars --seed 7 --out data/mars7

  # Train a method, overriding config values on the command line
  python -m celestial_uda train --config runs.cfg --data data/mars7 --out runs/a \\
      --method inst_adv_pc_sff --seed 3

  # Score a checkpoint on the held-out target split
  python -m celestial_uda eval --checkpoint runs/a/last.pt --data data/mars7

  # Compare every report found under runs/
  python -m celestial_uda report runs/ --csv summary.csv
"""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="celestial_uda",
        description="Domain adaptation toolkit for one-stage terrain detectors",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="Enable debug logging"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="Render a synthetic dataset recipe")
    gen.add_argument("--recipe", choices=sorted(RECIPES), default=RECIPE_MINI_MARS)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", type=Path, required=True, help="Dataset directory")
    gen.add_argument("--size", type=int, default=DEFAULT_INPUT_SIZE)
    gen.add_argument(
        "--label-target-train",
        action="store_true",
        help="Also write labels for target_train (needed by target_only)",
    )

    tr = sub.add_parser(
        "train",
        help="Train one method",
        description="Any TrainConfig key may be overridden as --key value.",
        allow_abbrev=False,
    )
    tr.add_argument("--config", type=Path, help="Flat key = value config file")
    tr.add_argument("--data", type=Path, required=True, help="Dataset directory")
    tr.add_argument("--out", type=Path, required=True, help="Run directory")
    tr.add_argument(
        "--val",
        nargs="?",
        const=SPLIT_TARGET_TEST,
        metavar="SPLIT",
        help=(
            "Evaluate on SPLIT (default "
            f"{SPLIT_TARGET_TEST}) after each epoch and keep the best as {CHECKPOINT_BEST}. "
            f"{SPLIT_TARGET_TEST} is also what eval reports on, so choosing the "
            "checkpoint there makes its score optimistic; prefer a held-out split"
        ),
    )
    tr.add_argument(
        "--print-config", action="store_true", help="Print the resolved config and exit"
    )

    ev = sub.add_parser("eval", help="Evaluate a checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True, help="Dataset directory")
    ev.add_argument("--split", default=SPLIT_TARGET_TEST)
    ev.add_argument("--map-iou", type=float, default=DEFAULT_MAP_IOU)
    ev.add_argument("--conf", type=float, help="Confidence threshold override")
    ev.add_argument("--nms", type=float, help="NMS IoU override")
    ev.add_argument(
        "--out", type=Path, help=f"Report path (default: next to checkpoint, {REPORT_NAME})"
    )

    rep = sub.add_parser("report", help="Aggregate evaluation reports")
    rep.add_argument(
        "paths", nargs="+", type=Path, help=f"Report files or directories with {REPORT_NAME}"
    )
    rep.add_argument("--csv", type=Path, help="Also write machine-readable rows")
    return parser


def parse_overrides(
    parser: argparse.ArgumentParser, extra: Sequence[str]
) -> dict[str, str]:
    """Turn leftover `--key value` / `--key=value` tokens into config overrides."""
    overrides: dict[str, str] = {}
    tokens = list(extra)
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--"):
            parser.error(f"unexpected argument {token!r}")
        name, sep, value = token[2:].partition("=")
        key = name.replace("-", "_")
        if key not in CONFIG_KEYS:
            parser.error(f"unknown config key --{name}")
        if not sep:
            if i + 1 >= len(tokens):
                parser.error(f"--{name} needs a value")
            i += 1
            value = tokens[i]
        overrides[key] = value
        i += 1
    return overrides


def _collect_reports(paths: Sequence[Path]) -> list[Path]:
    found: list[Path] = []
    for path in paths:
        if path.is_dir():
            found.extend(sorted(path.rglob(REPORT_NAME)))
        else:
            found.append(path)
    if not found:
        raise ConfigError(f"No {REPORT_NAME} files under {', '.join(map(str, paths))}")
    return found


def _run_generate(args: argparse.Namespace) -> int:
    manifests = generate_recipe(
        args.recipe,
        args.seed,
        args.out,
        size=args.size,
        label_target_train=args.label_target_train,
    )
    for split, manifest in manifests.items():
        _LOGGER.info("%s: %d images", split, len(manifest["items"]))
    return 0


def _run_train(args: argparse.Namespace, overrides: dict[str, str]) -> int:
    cfg = load_config(args.config, overrides)
    if args.print_config:
        print(format_config(cfg), end="")
        return 0
    source = load_split(args.data, SPLIT_SOURCE_TRAIN)
    target = load_split(args.data, SPLIT_TARGET_TRAIN)
    val = None
    if args.val:
        if args.val == SPLIT_TARGET_TEST:
            _LOGGER.warning(
                "Selecting the best checkpoint on %s, the split eval reports on; "
                "its mAP will be optimistic",
                args.val,
            )
        val = load_split(args.data, args.val)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / RUN_CONFIG_NAME).write_text(format_config(cfg), encoding="utf-8")
    except OSError as err:
        raise DatasetIOError(f"Could not write to {args.out}: {err}") from err
    result = train(cfg, source, target, args.out, val)
    _LOGGER.info("Last checkpoint: %s", result.last_checkpoint)
    if result.best_checkpoint is not None:
        _LOGGER.info(
            "Best checkpoint: %s (mAP %.4f)", result.best_checkpoint, result.best_map
        )
    return 0


def _run_eval(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    saved = checkpoint.train_config
    conf = args.conf if args.conf is not None else saved.get("conf_threshold")
    nms = args.nms if args.nms is not None else saved.get("nms_iou")
    split = load_split(args.data, args.split)
    kwargs = {"map_iou": args.map_iou}
    if conf is not None:
        kwargs["conf_threshold"] = float(conf)
    if nms is not None:
        kwargs["nms_iou"] = float(nms)
    report = evaluate(checkpoint, split, **kwargs)
    out = args.out or args.checkpoint.parent / REPORT_NAME
    save_report(report, out)
    for name, ap in report.per_class_ap.items():
        print(f"{name:<12} AP {ap:.4f}")
    print(f"{'mAP':<12}    {report.map:.4f}")
    if report.absent_classes:
        print(f"absent: {', '.join(report.absent_classes)}")
    _LOGGER.info("Report written to %s", out)
    return 0


def _run_report(args: argparse.Namespace) -> int:
    reports = [load_report(path) for path in _collect_reports(args.paths)]
    summaries = aggregate_reports(reports, METHODS_ORDER)
    print(format_report_table(summaries), end="")
    if args.csv:
        write_report_csv(summaries, args.csv)
        _LOGGER.info("Rows written to %s", args.csv)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides: dict[str, str] = {}
    if args.command == "train":
        overrides = parse_overrides(parser, extra)
    elif extra:
        parser.error(f"unrecognized arguments: {' '.join(extra)}")

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="[%(asctime)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    try:
        if args.command == "generate":
            return _run_generate(args)
        if args.command == "train":
            return _run_train(args, overrides)
        if args.command == "eval":
            return _run_eval(args)
        return _run_report(args)
    except UdaError as err:
        _LOGGER.error("%s", err)
        return 1
    except KeyboardInterrupt:
        _LOGGER.error("Interrupted")
        return 130
