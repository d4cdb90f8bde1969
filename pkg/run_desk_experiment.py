#!/usr/bin/env python3

"""
Desk Experiment - mini-mars Method Comparison

Generates the mini-mars recipe once, trains the source-only baseline, the
inst_adv_pc_sff adaptation method and the target-only oracle over several
seeds, evaluates every run on target_test and prints the comparison table.

The expected outcome on median target_test mAP is
    target_only > source_only  and  inst_adv_pc_sff >= source_only + 0.02

Usage workflow:
1. Run with defaults (5 seeds, 50 epochs) on a machine with a few hours to spare
2. Or shorten with --seeds and --set epochs=N for a smoke run
3. Re-run with --skip-existing to resume after an interruption
"""

import argparse
import logging
import sys
from pathlib import Path

from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from celestial_uda.config import load_config
from celestial_uda.const import (
    CHECKPOINT_LAST,
    MANIFEST_NAME,
    METHOD_INST_ADV_PC_SFF,
    METHOD_SOURCE_ONLY,
    METHOD_TARGET_ONLY,
    METHODS_ORDER,
    RECIPE_MINI_MARS,
    REPORT_NAME,
    SPLIT_SOURCE_TRAIN,
    SPLIT_TARGET_TEST,
    SPLIT_TARGET_TRAIN,
)
from celestial_uda.data import generate_recipe, load_split
from celestial_uda.evaluation import (
    aggregate_reports,
    evaluate,
    format_report_table,
    load_report,
    save_report,
    write_report_csv,
)
from celestial_uda.exceptions import UdaError
from celestial_uda.trainer import train

logging.basicConfig(
    level=logging.INFO, format="[%(asctime)s] %(message)s", datefmt="%Y-%m-%d %H:%M:%S"
)
logger = logging.getLogger(__name__)

DEFAULT_METHODS = (METHOD_SOURCE_ONLY, METHOD_INST_ADV_PC_SFF, METHOD_TARGET_ONLY)
DEFAULT_SEEDS = 5
# Absolute mAP the adapted method must add over source_only
MIN_ADAPTATION_GAIN = 0.02


class DeskExperiment:
    def __init__(
        self,
        out_dir: Path,
        data_seed: int,
        seeds: list[int],
        methods: list[str],
        overrides: dict[str, str],
    ):
        self.out_dir = out_dir
        self.data_dir = out_dir / "data"
        self.data_seed = data_seed
        self.seeds = seeds
        self.methods = methods
        self.overrides = overrides

    def prepare_data(self) -> None:
        """Render the dataset unless a previous run already did."""
        manifests = [
            self.data_dir / split / MANIFEST_NAME
            for split in (SPLIT_SOURCE_TRAIN, SPLIT_TARGET_TRAIN, SPLIT_TARGET_TEST)
        ]
        if all(path.exists() for path in manifests):
            logger.info("Reusing dataset at %s", self.data_dir)
            return
        logger.info("Generating %s (seed %d)...", RECIPE_MINI_MARS, self.data_seed)
        generate_recipe(
            RECIPE_MINI_MARS, self.data_seed, self.data_dir, label_target_train=True
        )

    def run_dir(self, method: str, seed: int) -> Path:
        return self.out_dir / "runs" / f"{method}_seed{seed}"

    def run_all(self, skip_existing: bool) -> list[Path]:
        source = load_split(self.data_dir, SPLIT_SOURCE_TRAIN)
        target = load_split(self.data_dir, SPLIT_TARGET_TRAIN)
        test = load_split(self.data_dir, SPLIT_TARGET_TEST)
        runs = [(method, seed) for method in self.methods for seed in self.seeds]
        reports = []
        with logging_redirect_tqdm():
            for method, seed in tqdm(runs, desc="runs", unit="run"):
                run_dir = self.run_dir(method, seed)
                report_path = run_dir / REPORT_NAME
                if skip_existing and report_path.exists():
                    logger.info("Skipping %s seed %d (report exists)", method, seed)
                    reports.append(report_path)
                    continue
                cfg = load_config(
                    overrides={**self.overrides, "method": method, "seed": seed}
                )
                train(cfg, source, target, run_dir)
                report = evaluate(
                    run_dir / CHECKPOINT_LAST,
                    test,
                    conf_threshold=cfg.conf_threshold,
                    nms_iou=cfg.nms_iou,
                )
                save_report(report, report_path)
                logger.info("✓ %s seed %d: mAP %.4f", method, seed, report.map)
                reports.append(report_path)
        return reports

    def summarize(self, report_paths: list[Path]) -> bool:
        summaries = aggregate_reports(
            [load_report(path) for path in report_paths], METHODS_ORDER
        )
        print()
        print(format_report_table(summaries), end="")
        write_report_csv(summaries, self.out_dir / "summary.csv")

        medians = {s.method: s.median for s in summaries}
        if not all(m in medians for m in DEFAULT_METHODS):
            return True
        base = medians[METHOD_SOURCE_ONLY]
        adapted = medians[METHOD_INST_ADV_PC_SFF]
        oracle = medians[METHOD_TARGET_ONLY]
        if oracle > base and adapted >= base + MIN_ADAPTATION_GAIN:
            logger.info("✓ Domain gap present and adaptation beats the baseline")
            return True
        logger.warning(
            "✗ Expected ordering not met: source_only %.4f, %s %.4f, target_only %.4f",
            base,
            METHOD_INST_ADV_PC_SFF,
            adapted,
            oracle,
        )
        return False


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ValueError(f"Expected key=value, got {pair!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def main():
    parser = argparse.ArgumentParser(
        description="Compare source_only, inst_adv_pc_sff and target_only on mini-mars",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Full comparison: 3 methods x 5 seeds, 50 epochs each
  python run_desk_experiment.py --out desk/

  # Quick smoke run
  python run_desk_experiment.py --out smoke/ --seeds 1 --set epochs=2 --set batch_size=8

  # Resume, reusing finished runs
  python run_desk_experiment.py --out desk/ --skip-existing
        """,
    )
    parser.add_argument("--out", type=Path, required=True, help="Experiment directory")
    parser.add_argument(
        "--seeds",
        type=int,
        default=DEFAULT_SEEDS,
        help=f"Number of training seeds per method (default: {DEFAULT_SEEDS})",
    )
    parser.add_argument(
        "--data-seed", type=int, default=0, help="Dataset seed (default: 0)"
    )
    parser.add_argument(
        "--methods",
        nargs="+",
        default=list(DEFAULT_METHODS),
        choices=METHODS_ORDER,
        help="Methods to run",
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Config override applied to every run (repeatable)",
    )
    parser.add_argument(
        "--skip-existing",
        action="store_true",
        help="Reuse runs whose evaluation report already exists",
    )
    args = parser.parse_args()

    if args.seeds < 1:
        logger.error("--seeds must be at least 1")
        sys.exit(1)
    try:
        overrides = parse_overrides(args.overrides)
    except ValueError as e:
        logger.error(str(e))
        sys.exit(1)

    experiment = DeskExperiment(
        args.out, args.data_seed, list(range(args.seeds)), args.methods, overrides
    )
    try:
        experiment.prepare_data()
        report_paths = experiment.run_all(args.skip_existing)
        ok = experiment.summarize(report_paths)
    except KeyboardInterrupt:
        logger.info("\nInterrupted by user")
        sys.exit(1)
    except UdaError as e:
        logger.error(f"Experiment failed: {e}")
        sys.exit(1)
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
