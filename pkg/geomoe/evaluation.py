"""Pose AUC, homography accuracy, inlier classification and benchmark runs."""
from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from contextlib import suppress
from dataclasses import dataclass, field, replace
import logging
import math
import os
import time
from typing import Any

import numpy as np
from scipy.integrate import trapezoid

from .const import (
    ARM_GEOMOE,
    ARM_GEOMOE_RANSAC,
    ARM_ORACLE,
    ARM_RANSAC,
    ARM_RAW,
    DEFAULT_ARMS,
    DEFAULT_CLASSIFICATION_THRESHOLD,
    DEFAULT_HOMOGRAPHY_THRESHOLDS,
    DEFAULT_RANSAC_HOMOGRAPHY_THRESHOLD,
    MIN_CORRESPONDENCES,
)
from .exceptions import (
    GeoMoEException,
    InvalidConfigException,
    InvalidInputException,
)
from .geometry import (
    decompose_essential,
    dlt_homography,
    homography_corner_error,
    homography_to_pixels,
    pose_angular_errors,
    weighted_eight_point,
)
from .helpers import Registry, derive_seed
from .models import (
    AucSpec,
    CorrespondenceSet,
    EvaluationConfig,
    GeneratedPair,
    GeoMoEConfig,
    Homography,
    RansacConfig,
    RelativePose,
)
from .network import ModelCheckpoint, model_forward, model_parameter_count
from .robust import ransac_essential, ransac_homography

_LOGGER = logging.getLogger(__name__)

FLAG_NO_PREDICTED_POSITIVES = "no_predicted_positives"
FLAG_NO_ACTUAL_POSITIVES = "no_actual_positives"

MODEL_ARMS = frozenset({ARM_GEOMOE, ARM_GEOMOE_RANSAC})

# Stream offsets keeping the essential and homography RANSAC draws apart
_ESSENTIAL_STREAM = 0
_HOMOGRAPHY_STREAM = 1


def _errors(values: Iterable[float]) -> np.ndarray:
    errors = np.asarray(list(values), dtype=np.float64).reshape(-1)
    if errors.size == 0:
        raise InvalidInputException("Cannot score an empty error list")
    errors = np.where(np.isnan(errors), np.inf, errors)
    negative = np.flatnonzero(errors < 0)
    if negative.size:
        raise InvalidInputException("Errors must be non-negative", int(negative[0]))
    return errors


def _histogram_auc(errors: np.ndarray, spec: AucSpec) -> list[float]:
    width = spec.bin_width_deg
    bins = [max(1, int(round(t / width))) for t in spec.thresholds_deg]
    edges = width * np.arange(max(bins) + 1)
    counts, _ = np.histogram(errors[np.isfinite(errors)], bins=edges)
    cumulative = np.cumsum(counts) / len(errors)
    return [100.0 * float(cumulative[:count].mean()) for count in bins]


def _trapezoid_auc(errors: np.ndarray, spec: AucSpec) -> list[float]:
    ordered = np.concatenate([[0.0], np.sort(errors)])
    recall = np.concatenate([[0.0], np.arange(1, len(errors) + 1) / len(errors)])
    values = []
    for threshold in spec.thresholds_deg:
        last = int(np.searchsorted(ordered, threshold))
        x = np.concatenate([ordered[:last], [threshold]])
        y = np.concatenate([recall[:last], [recall[last - 1]]])
        values.append(100.0 * float(trapezoid(y, x=x)) / threshold)
    return values


AUC_METHODS: Registry = Registry()
AUC_METHODS.register("histogram")(_histogram_auc)
AUC_METHODS.register("trapezoid")(_trapezoid_auc)


def pose_auc(errors_deg: Iterable[float], spec: AucSpec | None = None) -> list[float]:
    """Return the AUC percentage at every threshold; failures are +inf."""
    spec = spec or AucSpec()
    method = AUC_METHODS.get(spec.method)
    if method is None:
        raise InvalidConfigException("auc.method", f"unknown method {spec.method!r}")
    return method(_errors(errors_deg), spec)


@dataclass(frozen=True)
class ClassificationMetrics:
    """Inlier precision, recall and F1."""

    precision: float
    recall: float
    f1: float
    flags: tuple[str, ...] = ()


def classification_metrics(
    predicted: np.ndarray | Sequence[float],
    labels: np.ndarray | Sequence[bool],
    threshold: float = DEFAULT_CLASSIFICATION_THRESHOLD,
) -> ClassificationMetrics:
    """Score predictions at ``threshold`` against ground-truth labels."""
    scores = np.asarray(predicted, dtype=np.float64).reshape(-1)
    truth = np.asarray(labels).astype(bool).reshape(-1)
    if scores.shape != truth.shape:
        raise InvalidInputException(
            f"{scores.size} predictions for {truth.size} labels"
        )
    positive = scores >= threshold
    true_positives = int((positive & truth).sum())
    flags = []

    if positive.any():
        precision = true_positives / int(positive.sum())
    else:
        precision = 0.0
        flags.append(FLAG_NO_PREDICTED_POSITIVES)
    if truth.any():
        recall = true_positives / int(truth.sum())
    else:
        recall = 0.0
        flags.append(FLAG_NO_ACTUAL_POSITIVES)
    f1 = 0.0
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return ClassificationMetrics(precision, recall, f1, tuple(flags))


def homography_accuracy(
    corner_errors: Iterable[float],
    thresholds: Sequence[float] = DEFAULT_HOMOGRAPHY_THRESHOLDS,
) -> list[float]:
    """Return the percentage of errors strictly below every pixel threshold."""
    errors = _errors(corner_errors)
    return [100.0 * float((errors < t).mean()) for t in thresholds]


@dataclass
class PairContext:
    """Everything an arm needs to score one pair."""

    pair: GeneratedPair
    checkpoint: ModelCheckpoint | None
    essential_ransac: RansacConfig
    homography_ransac: RansacConfig
    evaluation: EvaluationConfig
    _prediction: ModelPrediction | None = None

    @property
    def correspondences(self) -> CorrespondenceSet:
        """Return the correspondences of the pair."""
        return self.pair.correspondences

    def prediction(self) -> ModelPrediction:
        """Run the model once per pair and share the result between arms."""
        if self._prediction is None:
            if self.checkpoint is None:
                raise InvalidConfigException(
                    "evaluation.arms", "GeoMoE arms require a checkpoint"
                )
            start = time.perf_counter()
            _, weights, diagnostics = model_forward(
                self.correspondences, self.checkpoint
            )
            self._prediction = ModelPrediction(
                weights=weights,
                runtime_s=time.perf_counter() - start,
                expert_mass={
                    _route_name(key): [float(v) for v in mass]
                    for key, mass in diagnostics.expert_mass.items()
                },
            )
        return self._prediction

    def predicted_inliers(self) -> np.ndarray:
        """Return the indices whose weight reaches the classification threshold."""
        weights = self.prediction().weights
        return np.flatnonzero(weights >= self.evaluation.classification_threshold)


@dataclass(frozen=True)
class ModelPrediction:
    """Final-layer weights of one pair and how long the model took."""

    weights: np.ndarray
    runtime_s: float
    expert_mass: dict[str, list[float]]


@dataclass
class ArmEstimate:
    """What an arm produced for one pair."""

    pose: RelativePose | None = None
    homography: Homography | None = None
    scores: np.ndarray | None = None
    failures: list[str] = field(default_factory=list)
    extra_runtime_s: float = 0.0
    expert_mass: dict[str, list[float]] | None = None


def _route_name(key: tuple[int, str]) -> str:
    layer, kind = key
    return f"l{layer}_{kind}"


def _attempt(estimate: ArmEstimate, what: str, fn: Callable[[], Any]) -> Any:
    try:
        return fn()
    except GeoMoEException as err:
        estimate.failures.append(f"{what}: {err}")
        _LOGGER.debug("%s failed: %s", what, err)
        return None


def _weighted_pose(corrs: CorrespondenceSet, weights: np.ndarray) -> RelativePose:
    essential = weighted_eight_point(corrs, weights)
    return decompose_essential(essential, corrs, weights)


def _ransac_pose(corrs: CorrespondenceSet, config: RansacConfig) -> RelativePose:
    result = ransac_essential(corrs, config)
    mask = result.inlier_mask.astype(np.float64)
    return decompose_essential(result.model, corrs, mask)


def _subset(corrs: CorrespondenceSet, indices: np.ndarray) -> CorrespondenceSet:
    if len(indices) < MIN_CORRESPONDENCES:
        raise InvalidInputException(
            f"Only {len(indices)} correspondences reach the classification threshold"
        )
    return corrs.subset(indices)


ARMS: Registry = Registry()


@ARMS.register(ARM_RAW)
def _raw_arm(context: PairContext) -> ArmEstimate:
    """Uniform weights for the eight-point solver and DLT on everything."""
    corrs = context.correspondences
    estimate = ArmEstimate()
    estimate.pose = _attempt(
        estimate, "pose", lambda: _weighted_pose(corrs, np.ones(len(corrs)))
    )
    if context.pair.gt_homography is not None:
        estimate.homography = _attempt(
            estimate, "homography", lambda: dlt_homography(corrs)
        )
    return estimate


@ARMS.register(ARM_RANSAC)
def _ransac_arm(context: PairContext) -> ArmEstimate:
    """RANSAC for both models."""
    corrs = context.correspondences
    estimate = ArmEstimate()
    estimate.pose = _attempt(
        estimate, "pose", lambda: _ransac_pose(corrs, context.essential_ransac)
    )
    if context.pair.gt_homography is not None:
        estimate.homography = _attempt(
            estimate,
            "homography",
            lambda: ransac_homography(corrs, context.homography_ransac).model,
        )
    return estimate


@ARMS.register(ARM_GEOMOE)
def _geomoe_arm(context: PairContext) -> ArmEstimate:
    """Predicted weights for the eight-point solver, DLT on predicted inliers."""
    corrs = context.correspondences
    estimate = ArmEstimate()
    prediction = _attempt(estimate, "model", context.prediction)
    if prediction is None:
        return estimate
    estimate.scores = prediction.weights
    estimate.extra_runtime_s = prediction.runtime_s
    estimate.expert_mass = prediction.expert_mass
    estimate.pose = _attempt(
        estimate, "pose", lambda: _weighted_pose(corrs, prediction.weights)
    )
    if context.pair.gt_homography is not None:
        estimate.homography = _attempt(
            estimate,
            "homography",
            lambda: dlt_homography(_subset(corrs, context.predicted_inliers())),
        )
    return estimate


@ARMS.register(ARM_GEOMOE_RANSAC)
def _geomoe_ransac_arm(context: PairContext) -> ArmEstimate:
    """RANSAC restricted to the predicted inliers."""
    corrs = context.correspondences
    estimate = ArmEstimate()
    prediction = _attempt(estimate, "model", context.prediction)
    if prediction is None:
        return estimate
    estimate.scores = prediction.weights
    estimate.extra_runtime_s = prediction.runtime_s
    estimate.expert_mass = prediction.expert_mass
    kept = _attempt(
        estimate,
        "pose",
        lambda: _subset(corrs, context.predicted_inliers()),
    )
    if kept is None:
        return estimate
    estimate.pose = _attempt(
        estimate, "pose", lambda: _ransac_pose(kept, context.essential_ransac)
    )
    if context.pair.gt_homography is not None:
        estimate.homography = _attempt(
            estimate,
            "homography",
            lambda: ransac_homography(kept, context.homography_ransac).model,
        )
    return estimate


@ARMS.register(ARM_ORACLE)
def _oracle_arm(context: PairContext) -> ArmEstimate:
    """Ground-truth labels as weights."""
    corrs = context.correspondences
    labels = context.pair.labels
    estimate = ArmEstimate(scores=labels.astype(np.float64))
    estimate.pose = _attempt(
        estimate, "pose", lambda: _weighted_pose(corrs, labels.astype(np.float64))
    )
    if context.pair.gt_homography is not None:
        estimate.homography = _attempt(
            estimate,
            "homography",
            lambda: dlt_homography(_subset(corrs, np.flatnonzero(labels))),
        )
    return estimate


@dataclass(frozen=True)
class PairTrace:
    """Scores of one arm on one pair."""

    pair_id: int
    arm: str
    rotation_error_deg: float
    translation_error_deg: float
    corner_error_px: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    runtime_s: float = 0.0
    failure: str | None = None
    expert_mass: dict[str, list[float]] | None = None

    @property
    def pose_error_deg(self) -> float:
        """Return the AUC error: the larger of the two angular errors."""
        return max(self.rotation_error_deg, self.translation_error_deg)

    def to_dict(self, include_timing: bool = True) -> dict[str, Any]:
        """Return a JSON-ready mapping; infinite errors become None."""
        data = {
            "pair_id": self.pair_id,
            "arm": self.arm,
            "rotation_error_deg": _finite_or_none(self.rotation_error_deg),
            "translation_error_deg": _finite_or_none(self.translation_error_deg),
            "corner_error_px": _finite_or_none(self.corner_error_px),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "failure": self.failure,
            "expert_mass": self.expert_mass,
        }
        if include_timing:
            data["runtime_s"] = self.runtime_s
        return data


def _finite_or_none(value: float | None) -> float | None:
    if value is None or not math.isfinite(value):
        return None
    return value


def trace_pair(arm: str, context: PairContext) -> PairTrace:
    """Run one arm on one pair and score it."""
    pair = context.pair
    if arm in MODEL_ARMS:
        # The forward pass is timed on its own; the arm reports its failure
        with suppress(GeoMoEException):
            context.prediction()
    start = time.perf_counter()
    estimate = ARMS[arm](context)
    runtime = time.perf_counter() - start + estimate.extra_runtime_s

    rotation_error = translation_error = math.inf
    if estimate.pose is not None:
        rotation_error, translation_error = pose_angular_errors(
            estimate.pose, pair.gt_pose
        )

    corner_error = None
    if pair.gt_homography is not None:
        corner_error = math.inf
        if estimate.homography is not None:
            evaluation = context.evaluation
            intrinsics = evaluation.frame_intrinsics
            corner_error = homography_corner_error(
                homography_to_pixels(estimate.homography, intrinsics),
                homography_to_pixels(pair.gt_homography, intrinsics),
                evaluation.frame_width,
                evaluation.frame_height,
            )

    precision = recall = f1 = None
    labels = pair.correspondences.labels
    if estimate.scores is not None and labels is not None:
        metrics = classification_metrics(
            estimate.scores, labels, context.evaluation.classification_threshold
        )
        precision, recall, f1 = metrics.precision, metrics.recall, metrics.f1

    return PairTrace(
        pair_id=pair.pair_id,
        arm=arm,
        rotation_error_deg=rotation_error,
        translation_error_deg=translation_error,
        corner_error_px=corner_error,
        precision=precision,
        recall=recall,
        f1=f1,
        runtime_s=runtime,
        failure="; ".join(estimate.failures) or None,
        expert_mass=estimate.expert_mass,
    )


@dataclass(frozen=True)
class ArmSummary:
    """Aggregated scores of one arm over a dataset."""

    arm: str
    pairs: int
    failures: int
    auc: list[float]
    mean_error_deg: float | None
    median_error_deg: float
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    homography_accuracy: list[float] | None = None
    mean_runtime_s: float = 0.0
    median_runtime_s: float = 0.0
    expert_utilization: dict[str, list[float]] | None = None

    def to_dict(self, include_timing: bool = True) -> dict[str, Any]:
        """Return a JSON-ready mapping."""
        data = {
            "pairs": self.pairs,
            "failures": self.failures,
            "auc": self.auc,
            "mean_error_deg": self.mean_error_deg,
            "median_error_deg": _finite_or_none(self.median_error_deg),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "homography_accuracy": self.homography_accuracy,
            "expert_utilization": self.expert_utilization,
        }
        if include_timing:
            data["mean_runtime_s"] = self.mean_runtime_s
            data["median_runtime_s"] = self.median_runtime_s
        return data


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def summarize_arm(
    arm: str,
    traces: Sequence[PairTrace],
    auc: AucSpec,
    evaluation: EvaluationConfig,
) -> ArmSummary:
    """Reduce the traces of one arm, in order."""
    errors = np.array([t.pose_error_deg for t in traces], dtype=np.float64)
    finite = errors[np.isfinite(errors)]
    corner_errors = [t.corner_error_px for t in traces if t.corner_error_px is not None]
    scored = [t for t in traces if t.f1 is not None]
    runtimes = [t.runtime_s for t in traces]

    utilization = None
    masses = [t.expert_mass for t in traces if t.expert_mass]
    if masses:
        utilization = {
            key: [float(v) for v in np.mean([m[key] for m in masses], axis=0)]
            for key in sorted(masses[0])
        }

    return ArmSummary(
        arm=arm,
        pairs=len(traces),
        failures=int((~np.isfinite(errors)).sum()),
        auc=pose_auc(errors, auc),
        mean_error_deg=float(finite.mean()) if finite.size else None,
        median_error_deg=float(np.median(errors)),
        precision=_mean([t.precision for t in scored]),
        recall=_mean([t.recall for t in scored]),
        f1=_mean([t.f1 for t in scored]),
        homography_accuracy=(
            homography_accuracy(corner_errors, evaluation.homography_thresholds)
            if corner_errors
            else None
        ),
        mean_runtime_s=float(np.mean(runtimes)),
        median_runtime_s=float(np.median(runtimes)),
        expert_utilization=utilization,
    )


@dataclass
class BenchmarkReport:
    """Per-arm summaries of a benchmark, with the traces they came from."""

    arms: dict[str, ArmSummary]
    traces: list[PairTrace]
    auc: AucSpec
    evaluation: EvaluationConfig
    parameter_count: int | None = None
    config: dict[str, Any] | None = None

    @property
    def pairs(self) -> int:
        """Return the number of pairs scored."""
        return len({trace.pair_id for trace in self.traces})

    def to_dict(
        self, include_traces: bool = False, include_timing: bool = True
    ) -> dict[str, Any]:
        """Return the machine-readable report."""
        data: dict[str, Any] = {
            "pairs": self.pairs,
            "auc_thresholds_deg": list(self.auc.thresholds_deg),
            "auc_method": self.auc.method,
            "homography_thresholds_px": list(self.evaluation.homography_thresholds),
            "parameter_count": self.parameter_count,
            "arms": {
                name: summary.to_dict(include_timing)
                for name, summary in self.arms.items()
            },
        }
        if self.config is not None:
            data["config"] = self.config
        if include_traces:
            data["traces"] = [t.to_dict(include_timing) for t in self.traces]
        return data

    def format_table(self) -> str:
        """Return the human-readable table of the report."""
        auc_columns = [f"AUC@{t:g}" for t in self.auc.thresholds_deg]
        h_columns = [f"H@{t:g}px" for t in self.evaluation.homography_thresholds]
        header = [
            "arm",
            *auc_columns,
            "median",
            "fail",
            "P",
            "R",
            "F1",
            *h_columns,
            "ms/pair",
        ]
        rows = [header]
        for name, summary in self.arms.items():
            homography = summary.homography_accuracy or [None] * len(h_columns)
            rows.append(
                [
                    name,
                    *(f"{v:.2f}" for v in summary.auc),
                    _cell(summary.median_error_deg, ".3g"),
                    str(summary.failures),
                    _cell(summary.precision, ".3f"),
                    _cell(summary.recall, ".3f"),
                    _cell(summary.f1, ".3f"),
                    *(_cell(v, ".1f") for v in homography),
                    f"{1000 * summary.mean_runtime_s:.2f}",
                ]
            )
        widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
        lines = [
            "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()
            for row in rows
        ]
        lines.append(f"{self.pairs} pairs")
        if self.parameter_count is not None:
            lines.append(f"{self.parameter_count} model parameters")
        return "\n".join(lines)


def _cell(value: float | None, spec: str) -> str:
    if value is None:
        return "-"
    if not math.isfinite(value):
        return "inf"
    return format(value, spec)


def report_from_traces(
    traces: Sequence[PairTrace],
    auc: AucSpec | None = None,
    evaluation: EvaluationConfig | None = None,
    *,
    parameter_count: int | None = None,
    config: dict[str, Any] | None = None,
) -> BenchmarkReport:
    """Build a report from traces alone; arms keep their first-seen order."""
    auc = auc or AucSpec()
    evaluation = evaluation or EvaluationConfig()
    grouped: dict[str, list[PairTrace]] = {}
    for trace in traces:
        grouped.setdefault(trace.arm, []).append(trace)
    return BenchmarkReport(
        arms={
            arm: summarize_arm(arm, arm_traces, auc, evaluation)
            for arm, arm_traces in grouped.items()
        },
        traces=list(traces),
        auc=auc,
        evaluation=evaluation,
        parameter_count=parameter_count,
        config=config,
    )


def check_arms(arms: Sequence[str], checkpoint: ModelCheckpoint | None) -> None:
    """Reject unknown arms and model arms without a checkpoint."""
    if not arms:
        raise InvalidConfigException("evaluation.arms", "must name at least one arm")
    for arm in arms:
        if arm not in ARMS:
            raise InvalidConfigException(
                "evaluation.arms",
                f"unknown arm {arm!r}; choose from {', '.join(sorted(ARMS))}",
            )
        if arm in MODEL_ARMS and checkpoint is None:
            raise InvalidConfigException(
                "evaluation.arms", f"arm {arm!r} requires a checkpoint"
            )


def run_benchmark(
    dataset: Sequence[GeneratedPair],
    arms: Sequence[str] = DEFAULT_ARMS,
    checkpoint: ModelCheckpoint | None = None,
    *,
    config: GeoMoEConfig | None = None,
    auc: AucSpec | None = None,
    evaluation: EvaluationConfig | None = None,
    ransac: RansacConfig | None = None,
    homography_ransac: RansacConfig | None = None,
    threads: int | None = None,
    run_config: dict[str, Any] | None = None,
) -> BenchmarkReport:
    """Score every arm on every pair; ``config`` is checked against the checkpoint.

    RANSAC seeds are derived from the configured seed and the pair id, so the
    report does not depend on the worker count.
    """
    if not dataset:
        raise InvalidInputException("Cannot benchmark an empty dataset")
    arms = list(dict.fromkeys(arms))
    check_arms(arms, checkpoint)
    if checkpoint is not None and config is not None:
        checkpoint.check_config(config)

    evaluation = evaluation or EvaluationConfig()
    essential_ransac = ransac or RansacConfig()
    homography_ransac = homography_ransac or RansacConfig(
        inlier_threshold=DEFAULT_RANSAC_HOMOGRAPHY_THRESHOLD
    )

    def score(pair: GeneratedPair) -> list[PairTrace]:
        context = PairContext(
            pair=pair,
            checkpoint=checkpoint,
            essential_ransac=replace(
                essential_ransac,
                seed=derive_seed(
                    essential_ransac.seed, pair.pair_id, _ESSENTIAL_STREAM
                ),
            ),
            homography_ransac=replace(
                homography_ransac,
                seed=derive_seed(
                    homography_ransac.seed, pair.pair_id, _HOMOGRAPHY_STREAM
                ),
            ),
            evaluation=evaluation,
        )
        return [trace_pair(arm, context) for arm in arms]

    workers = threads or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=workers) as executor:
        per_pair = list(executor.map(score, dataset))

    # Arm-major order: each arm's traces follow dataset order
    traces = [per_pair[i][j] for j in range(len(arms)) for i in range(len(per_pair))]
    failures = sum(trace.failure is not None for trace in traces)
    if failures:
        _LOGGER.warning("%d of %d estimates failed", failures, len(traces))

    report = report_from_traces(
        traces,
        auc,
        evaluation,
        parameter_count=(
            model_parameter_count(checkpoint.config) if checkpoint else None
        ),
        config=run_config,
    )
    _LOGGER.info("Benchmark over %d pairs\n%s", report.pairs, report.format_table())
    return report
