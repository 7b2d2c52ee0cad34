"""Tests for the benchmark metrics and arms."""
from __future__ import annotations

import math

import numpy as np
import pytest

from geomoe.const import ARM_GEOMOE, ARM_ORACLE, ARM_RANSAC, ARM_RAW
from geomoe.evaluation import (
    FLAG_NO_ACTUAL_POSITIVES,
    FLAG_NO_PREDICTED_POSITIVES,
    PairTrace,
    classification_metrics,
    homography_accuracy,
    pose_auc,
    report_from_traces,
    run_benchmark,
)
from geomoe.exceptions import (
    ConfigMismatchException,
    InvalidConfigException,
    InvalidInputException,
)
from geomoe.models import AucSpec, GeoMoEConfig, RansacConfig, SceneSpec
from geomoe.synthetic import generate_pairs

TEST_HALF_FAILED = [2.5] * 50 + [math.inf] * 50
TEST_RANSAC = RansacConfig(max_iterations=200, seed=4)
TEST_MONOTONE_LISTS = 1000


def _trace(pair_id: int, error: float, failure: str | None = None) -> PairTrace:
    return PairTrace(
        pair_id=pair_id,
        arm=ARM_RAW,
        rotation_error_deg=error,
        translation_error_deg=min(error, 1.0),
        failure=failure,
    )


@pytest.fixture(name="small_dataset")
def small_dataset_fixture():
    """Four pairs, the last one planar."""
    spec = SceneSpec(points_per_pair=48, outlier_ratio=0.3, seed=13)
    planar = SceneSpec(
        num_structures=1, points_per_pair=48, outlier_ratio=0.3, seed=13
    )
    pairs = generate_pairs(spec, 3, threads=1)
    extra = generate_pairs(planar, 4, threads=1)[3]
    return [*pairs, extra]


def test_histogram_auc_of_half_failed_run() -> None:
    """Half the pairs at 2.5 degrees and half failed give 30, 40 and 45."""
    assert pose_auc(TEST_HALF_FAILED) == pytest.approx([30.0, 40.0, 45.0], abs=1e-12)


def test_auc_bounds() -> None:
    """Perfect runs score 100 and failed runs score 0 with either method."""
    for method in ("histogram", "trapezoid"):
        spec = AucSpec(method=method)
        assert pose_auc([0.0] * 10, spec) == pytest.approx([100.0] * 3)
        assert pose_auc([math.inf] * 10, spec) == pytest.approx([0.0] * 3)


def test_trapezoid_auc_of_a_single_error() -> None:
    """One error at half the threshold covers three quarters of the area."""
    spec = AucSpec(thresholds_deg=(4.0,), method="trapezoid")

    assert pose_auc([2.0], spec) == pytest.approx([75.0])
    assert pose_auc([0.0, 2.0], spec) == pytest.approx([87.5])


@pytest.mark.parametrize("method", ["histogram", "trapezoid"])
def test_auc_is_monotone_in_errors(method: str) -> None:
    """Lowering errors never lowers the AUC."""
    spec = AucSpec(method=method)
    rng = np.random.default_rng(0)

    for _ in range(TEST_MONOTONE_LISTS):
        count = int(rng.integers(1, 60))
        errors = rng.uniform(0, 25, size=count)
        errors[rng.random(count) < 0.2] = math.inf
        better = errors.copy()
        lowered = rng.random(count) < 0.3
        candidates = rng.uniform(0, 25, size=count)
        better[lowered] = np.minimum(errors[lowered], candidates[lowered])

        for before, after in zip(pose_auc(errors, spec), pose_auc(better, spec)):
            assert after >= before - 1e-9


def test_auc_treats_nan_as_failure() -> None:
    """NaN errors count like infinite ones."""
    assert pose_auc([1.0, math.nan]) == pose_auc([1.0, math.inf])


@pytest.mark.parametrize("errors", [[], [1.0, -0.5]])
def test_auc_rejects_bad_errors(errors) -> None:
    """Empty or negative error lists are invalid."""
    with pytest.raises(InvalidInputException):
        pose_auc(errors)


def test_auc_rejects_unknown_method() -> None:
    """The method must be registered."""
    with pytest.raises(InvalidConfigException) as err:
        pose_auc([1.0], AucSpec(method="spline"))
    assert err.value.key == "auc.method"


def test_classification_all_positive() -> None:
    """Predicting everything as an inlier at a 50% prior."""
    labels = np.array([True, False] * 10)
    metrics = classification_metrics(np.ones(20), labels)

    assert metrics.precision == pytest.approx(0.5)
    assert metrics.recall == pytest.approx(1.0)
    assert metrics.f1 == pytest.approx(2 / 3)
    assert metrics.flags == ()


def test_classification_threshold_is_inclusive() -> None:
    """A score equal to the threshold is a positive."""
    metrics = classification_metrics([0.5, 0.2], [True, False], threshold=0.5)

    assert (metrics.precision, metrics.recall, metrics.f1) == (1.0, 1.0, 1.0)


def test_classification_without_predicted_positives() -> None:
    """No predicted positive gives zero precision and a flag."""
    metrics = classification_metrics(np.zeros(4), [True, False, True, False])

    assert metrics.precision == 0.0
    assert metrics.f1 == 0.0
    assert FLAG_NO_PREDICTED_POSITIVES in metrics.flags


def test_classification_without_actual_positives() -> None:
    """No labeled inlier gives zero recall and a flag."""
    metrics = classification_metrics(np.ones(3), [False, False, False])

    assert metrics.recall == 0.0
    assert FLAG_NO_ACTUAL_POSITIVES in metrics.flags


def test_classification_rejects_length_mismatch() -> None:
    """One label per prediction."""
    with pytest.raises(InvalidInputException):
        classification_metrics([0.1, 0.9], [True])


def test_homography_accuracy_is_strict() -> None:
    """Errors 2, 4, 8 and 16 px at 3, 5 and 10 px; an error on a threshold misses."""
    assert homography_accuracy([2.0, 4.0, 8.0, 16.0]) == [25.0, 50.0, 75.0]
    assert homography_accuracy([3.0], [3.0]) == [0.0]
    assert homography_accuracy([math.inf, 1.0], [3.0]) == [50.0]


def test_report_from_traces() -> None:
    """Summaries are recomputed from traces alone."""
    traces = [_trace(i, 2.5) for i in range(50)] + [
        _trace(50 + i, math.inf, "pose: degenerate") for i in range(50)
    ]
    report = report_from_traces(traces)
    summary = report.arms[ARM_RAW]

    assert report.pairs == 100
    assert summary.failures == 50
    assert summary.auc == pytest.approx([30.0, 40.0, 45.0], abs=1e-12)
    assert summary.mean_error_deg == pytest.approx(2.5)
    assert summary.median_error_deg == math.inf
    assert summary.to_dict()["median_error_deg"] is None
    assert "100 pairs" in report.format_table()


def test_benchmark_scores_every_arm(small_dataset) -> None:
    """Every arm scores every pair; only the planar pair has a corner error."""
    report = run_benchmark(
        small_dataset,
        [ARM_RAW, ARM_RANSAC, ARM_ORACLE],
        ransac=TEST_RANSAC,
        threads=2,
    )

    assert list(report.arms) == [ARM_RAW, ARM_RANSAC, ARM_ORACLE]
    assert [t.arm for t in report.traces[:4]] == [ARM_RAW] * 4
    assert [t.pair_id for t in report.traces[:4]] == [0, 1, 2, 3]
    for trace in report.traces:
        assert (trace.corner_error_px is not None) == (trace.pair_id == 3)

    oracle = report.arms[ARM_ORACLE]
    assert oracle.precision == pytest.approx(1.0)
    assert oracle.recall == pytest.approx(1.0)
    assert oracle.auc[0] >= report.arms[ARM_RAW].auc[0]
    assert report.arms[ARM_RAW].precision is None


def test_benchmark_is_deterministic(small_dataset) -> None:
    """Thread count and repeated runs do not change the report."""
    first = run_benchmark(small_dataset, [ARM_RANSAC], ransac=TEST_RANSAC, threads=1)
    second = run_benchmark(small_dataset, [ARM_RANSAC], ransac=TEST_RANSAC, threads=4)

    assert first.to_dict(include_traces=True, include_timing=False) == second.to_dict(
        include_traces=True, include_timing=False
    )


def test_benchmark_summary_matches_its_traces(small_dataset) -> None:
    """The stored summaries equal those recomputed from the traces."""
    report = run_benchmark(small_dataset, [ARM_RAW], ransac=TEST_RANSAC, threads=1)
    recomputed = report_from_traces(report.traces, report.auc, report.evaluation)

    assert recomputed.to_dict(include_timing=False) == report.to_dict(
        include_timing=False
    )


def test_benchmark_with_model(small_dataset, tiny_checkpoint, tiny_config) -> None:
    """Model arms record classification scores and expert utilization."""
    report = run_benchmark(
        small_dataset,
        [ARM_GEOMOE],
        tiny_checkpoint,
        config=tiny_config,
        ransac=TEST_RANSAC,
        threads=1,
    )
    summary = report.arms[ARM_GEOMOE]

    assert summary.pairs == len(small_dataset)
    assert summary.recall is not None
    assert report.parameter_count > 0
    assert sorted(summary.expert_utilization) == [
        "l0_decomposition",
        "l0_rectifier",
        "l1_decomposition",
        "l1_rectifier",
    ]
    for mass in summary.expert_utilization.values():
        assert sum(mass) == pytest.approx(1.0)


def test_benchmark_rejects_bad_arms(small_dataset) -> None:
    """Unknown arms and model arms without a checkpoint are config errors."""
    with pytest.raises(InvalidConfigException):
        run_benchmark(small_dataset, ["magic"])
    with pytest.raises(InvalidConfigException):
        run_benchmark(small_dataset, [ARM_GEOMOE])


def test_benchmark_checks_the_model_config(small_dataset, tiny_checkpoint) -> None:
    """A configuration disagreeing with the checkpoint is refused."""
    with pytest.raises(ConfigMismatchException):
        run_benchmark(
            small_dataset,
            [ARM_GEOMOE],
            tiny_checkpoint,
            config=GeoMoEConfig(layers=3, channels=8, sub_fields=4, loc_k=4),
        )


def test_benchmark_rejects_an_empty_dataset() -> None:
    """There is nothing to score."""
    with pytest.raises(InvalidInputException):
        run_benchmark([], [ARM_RAW])
