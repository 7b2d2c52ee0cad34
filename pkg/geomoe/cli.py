"""Command-line entry points: generate, train, filter, eval and pose."""
from __future__ import annotations

import argparse
from collections.abc import Callable, Sequence
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from .config import RunConfig, help_epilog, load_run_config, write_sidecar
from .const import (
    ALL_ARMS,
    CONF_EVALUATION,
    CONF_MODEL,
    CONF_RANSAC,
    CONF_RUN,
    CONF_SCENE,
    CONF_TRAINING,
    DOMAIN,
    EXIT_CONFIG_ERROR,
    EXIT_DATA_ERROR,
    EXIT_NUMERICAL_FAILURE,
    EXIT_OK,
    EXIT_UNEXPECTED,
)
from .dataset import (
    read_correspondences_text,
    read_dataset,
    read_weights_text,
    write_dataset,
    write_weights_text,
)
from .evaluation import run_benchmark
from .exceptions import (
    ConfigMismatchException,
    GeoMoEException,
    InvalidConfigException,
    InvalidInputException,
    NumericalFailureException,
)
from .geometry import decompose_essential, weighted_eight_point
from .helpers import Registry
from .models import EssentialMatrix, RelativePose
from .network import ModelCheckpoint, load_checkpoint, model_forward, save_checkpoint
from .robust import ransac_essential
from .synthetic import generate_pairs, summarize
from .training import train_loop

_LOGGER = logging.getLogger(__name__)

COMMANDS: Registry = Registry()

# The key each command's --seed flag sets
SEED_KEYS = {
    "generate": (CONF_SCENE, "seed"),
    "train": (CONF_TRAINING, "seed"),
    "eval": (CONF_RANSAC, "seed"),
    "pose": (CONF_RANSAC, "seed"),
}

METRICS_SUFFIX = ".metrics.csv"
_MAX_SEED = 2**64


def _matrix_lines(matrix: np.ndarray) -> list[str]:
    rows = np.atleast_2d(matrix)
    return [" ".join(repr(float(v)) for v in row) for row in rows]


def _print_pose(essential: EssentialMatrix, pose: RelativePose) -> None:
    print("E:")
    print("\n".join(_matrix_lines(essential.e)))
    print("R:")
    print("\n".join(_matrix_lines(pose.rotation)))
    print("t:")
    print("\n".join(_matrix_lines(pose.translation)))


def _model_config(run: RunConfig, checkpoint: ModelCheckpoint) -> RunConfig:
    """Take the model section from the checkpoint unless the user set one."""
    if run.sets_section(CONF_MODEL):
        checkpoint.check_config(run.model)
        return run
    return run.with_model(checkpoint.config)


@COMMANDS.register("generate")
def cmd_generate(args: argparse.Namespace, run: RunConfig) -> int:
    """Generate a synthetic dataset file."""
    pairs = generate_pairs(run.scene, run.pairs, threads=run.threads)
    write_dataset(pairs, args.output)
    write_sidecar(args.output, run)
    summary = summarize(pairs)
    print(f"pairs: {summary.pairs}")
    print(f"correspondences: {summary.correspondences}")
    print(f"injected_outliers: {summary.injected_outliers}")
    print(f"labeled_outliers: {summary.labeled_outliers}")
    print(f"injected_labeled_inliers: {summary.injected_labeled_inliers}")
    print(f"realized_outlier_ratio: {summary.realized_outlier_ratio:.6f}")
    return EXIT_OK


@COMMANDS.register("train")
def cmd_train(args: argparse.Namespace, run: RunConfig) -> int:
    """Train a model and write its checkpoint and metrics log."""
    checkpoint = None
    if args.resume is not None:
        checkpoint = load_checkpoint(args.resume)
        run = _model_config(run, checkpoint)
    dataset = read_dataset(args.dataset)
    output = Path(args.output)
    metrics_path = Path(f"{output}{METRICS_SUFFIX}")
    if checkpoint is None and metrics_path.exists():
        metrics_path.unlink()

    write_sidecar(output, run)
    try:
        result = train_loop(
            dataset,
            run.model,
            run.optimizer,
            run.training_seed,
            loss_weights=run.loss,
            checkpoint=checkpoint,
            metrics_path=metrics_path,
            threads=run.threads,
        )
    except NumericalFailureException as err:
        if err.checkpoint is not None:
            save_checkpoint(err.checkpoint, output)
            _LOGGER.error("Saved the last good checkpoint to %s", output)
        raise
    save_checkpoint(result.checkpoint, output)
    print(f"iterations: {result.checkpoint.iterations}")
    if result.records:
        last = result.records[-1]
        print(f"final_total_loss: {last.total!r}")
    return EXIT_OK


@COMMANDS.register("filter")
def cmd_filter(args: argparse.Namespace, run: RunConfig) -> int:
    """Write the inlier probability of every correspondence of a text file."""
    checkpoint = load_checkpoint(args.checkpoint)
    run = _model_config(run, checkpoint)
    corrs = read_correspondences_text(args.input)
    _, weights, _ = model_forward(corrs, checkpoint)
    pose = None
    if args.pose:
        essential = weighted_eight_point(corrs, weights)
        pose = decompose_essential(essential, corrs, weights)
    write_weights_text(weights, args.output, pose=pose, header=run.to_yaml())
    return EXIT_OK


@COMMANDS.register("eval")
def cmd_eval(args: argparse.Namespace, run: RunConfig) -> int:
    """Benchmark estimator arms over a dataset and write the report."""
    checkpoint = None
    if args.checkpoint is not None:
        checkpoint = load_checkpoint(args.checkpoint)
        run = _model_config(run, checkpoint)
    dataset = read_dataset(args.dataset)
    report = run_benchmark(
        dataset,
        run.arms,
        checkpoint,
        auc=run.auc,
        evaluation=run.evaluation,
        ransac=run.essential_ransac,
        homography_ransac=run.homography_ransac,
        threads=run.threads,
        run_config=run.document,
    )
    _write_json(args.output, report.to_dict())
    if args.trace is not None:
        _write_json(
            args.trace,
            {
                "config": run.document,
                "traces": [trace.to_dict() for trace in report.traces],
            },
        )
    print(report.format_table())
    return EXIT_OK


@COMMANDS.register("pose")
def cmd_pose(args: argparse.Namespace, run: RunConfig) -> int:
    """Estimate E, R and t from a text correspondence file."""
    corrs = read_correspondences_text(args.input)
    if args.ransac:
        result = ransac_essential(corrs, run.essential_ransac)
        essential = result.model
        weights = result.inlier_mask.astype(np.float64)
    else:
        weights = np.ones(len(corrs))
        if args.weights is not None:
            weights = read_weights_text(args.weights)
            if len(weights) != len(corrs):
                raise InvalidInputException(
                    f"{len(weights)} weights for {len(corrs)} correspondences"
                )
        essential = weighted_eight_point(corrs, weights)
    _print_pose(essential, decompose_essential(essential, corrs, weights))
    return EXIT_OK


def _write_json(path: str | Path, data: dict[str, Any]) -> None:
    Path(path).write_text(
        json.dumps(data, indent=2, allow_nan=False) + "\n", encoding="utf-8"
    )


def _common_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", metavar="PATH", help="YAML run configuration")
    parser.add_argument(
        "--set",
        metavar="SECTION.KEY=VALUE",
        action="append",
        default=[],
        dest="overrides",
        help="override one configuration key (repeatable)",
    )
    parser.add_argument("--seed", type=int, metavar="U64", help="seed of the command")
    parser.add_argument(
        "--threads", type=int, metavar="N", help="worker cap (default: all cores)"
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log debug messages"
    )
    return parser


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser of the ``geomoe`` command."""
    common = _common_parser()
    epilog = help_epilog()
    parser = argparse.ArgumentParser(
        prog=DOMAIN,
        description="Correspondence filtering with a geometry-aware mixture of "
        "experts.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return subparsers.add_parser(
            name,
            parents=[common],
            help=help_text,
            description=help_text,
            epilog=epilog,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )

    generate = add("generate", "generate a synthetic dataset")
    generate.add_argument("output", help="dataset file to write")

    train = add("train", "train a model on a dataset")
    train.add_argument("dataset", help="dataset file")
    train.add_argument("output", help="checkpoint file to write")
    train.add_argument("--resume", metavar="CHECKPOINT", help="continue a run")

    filter_ = add("filter", "predict inlier probabilities for correspondences")
    filter_.add_argument("checkpoint", help="model checkpoint")
    filter_.add_argument("input", help="text file of x1 y1 x2 y2 [label] lines")
    filter_.add_argument("output", help="weights file to write")
    filter_.add_argument(
        "--pose", action="store_true", help="append the estimated R and t"
    )

    evaluate = add("eval", "benchmark estimator arms on a dataset")
    evaluate.add_argument("dataset", help="dataset file")
    evaluate.add_argument("output", help="JSON report to write")
    evaluate.add_argument("--checkpoint", help="model checkpoint for GeoMoE arms")
    evaluate.add_argument(
        "--arm",
        action="append",
        dest="arms",
        choices=ALL_ARMS,
        help="estimator arm (repeatable, default from evaluation.arms)",
    )
    evaluate.add_argument("--trace", metavar="PATH", help="per-pair trace file")

    pose = add("pose", "estimate the relative pose of a correspondence file")
    pose.add_argument("input", help="text file of x1 y1 x2 y2 [label] lines")
    pose.add_argument("--weights", metavar="PATH", help="one weight per line")
    pose.add_argument(
        "--ransac", action="store_true", help="use RANSAC instead of weights"
    )
    return parser


def _flag_overrides(args: argparse.Namespace) -> list[tuple[str, str, Any]]:
    flags: list[tuple[str, str, Any]] = []
    if args.seed is not None:
        if not 0 <= args.seed < _MAX_SEED:
            raise InvalidConfigException("--seed", "must be an unsigned 64-bit value")
        if args.command in SEED_KEYS:
            flags.append((*SEED_KEYS[args.command], args.seed))
    if args.threads is not None:
        flags.append((CONF_RUN, "threads", args.threads))
    if getattr(args, "arms", None):
        flags.append((CONF_EVALUATION, "arms", list(args.arms)))
    return flags


def exit_code(err: BaseException) -> int:
    """Map an exception to the documented exit status."""
    if isinstance(err, (InvalidConfigException, ConfigMismatchException)):
        return EXIT_CONFIG_ERROR
    if isinstance(err, NumericalFailureException):
        return EXIT_NUMERICAL_FAILURE
    if isinstance(err, (GeoMoEException, OSError)):
        return EXIT_DATA_ERROR
    return EXIT_UNEXPECTED


def main(argv: Sequence[str] | None = None) -> int:
    """Run one command and return its exit status."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    command: Callable[[argparse.Namespace, RunConfig], int] = COMMANDS[args.command]
    try:
        run = load_run_config(args.config, args.overrides, _flag_overrides(args))
        return command(args, run)
    except (GeoMoEException, OSError) as err:
        _LOGGER.error("%s failed: %s", args.command, err)
        return exit_code(err)
    except Exception:  # pylint: disable=broad-except
        _LOGGER.exception("Unexpected error in %s", args.command)
        return EXIT_UNEXPECTED
