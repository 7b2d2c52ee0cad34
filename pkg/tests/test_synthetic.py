"""Tests for the synthetic scene generator."""
from __future__ import annotations

import math

import numpy as np
import pytest

from geomoe.exceptions import InvalidConfigException
from geomoe.geometry import apply_homography, symmetric_epipolar_distances
from geomoe.models import SceneSpec
from geomoe.synthetic import generate_pair, generate_pairs, summarize

TEST_SPEC = SceneSpec(points_per_pair=48, seed=21)


def test_generation_is_deterministic() -> None:
    """The same spec and pair id give the same pair."""
    first = generate_pair(TEST_SPEC, 4)
    second = generate_pair(TEST_SPEC, 4)

    np.testing.assert_array_equal(
        first.correspondences.as_array(), second.correspondences.as_array()
    )
    np.testing.assert_array_equal(first.labels, second.labels)
    np.testing.assert_array_equal(first.gt_essential.e, second.gt_essential.e)


def test_pair_ids_draw_independent_streams() -> None:
    """Two pair ids of one spec differ."""
    first = generate_pair(TEST_SPEC, 0)
    second = generate_pair(TEST_SPEC, 1)

    assert not np.array_equal(
        first.correspondences.as_array(), second.correspondences.as_array()
    )


def test_outlier_count_and_labels() -> None:
    """floor(ratio * N) correspondences are replaced; labels follow the residual."""
    pair = generate_pair(TEST_SPEC, 2)
    corrs = pair.correspondences

    assert len(corrs) == TEST_SPEC.points_per_pair
    assert pair.injected_outliers.sum() == math.floor(
        TEST_SPEC.outlier_ratio * TEST_SPEC.points_per_pair
    )
    distances = symmetric_epipolar_distances(
        corrs.x, corrs.x_prime, pair.gt_essential.e
    )
    np.testing.assert_array_equal(pair.labels, distances < TEST_SPEC.label_threshold)


def test_points_stay_in_the_frustum() -> None:
    """Clean correspondences lie in the image square of both views."""
    spec = SceneSpec(outlier_ratio=0.0, noise_sigma=0.0, points_per_pair=64, seed=3)
    corrs = generate_pair(spec, 0).correspondences
    extent = spec.frustum_half_extent

    assert np.abs(corrs.x).max() <= extent
    assert np.abs(corrs.x_prime).max() <= extent


def test_single_structure_has_a_homography(planar_pair, clean_pair) -> None:
    """Only single-plane scenes carry a ground-truth homography."""
    corrs = planar_pair.correspondences

    assert clean_pair.gt_homography is None
    np.testing.assert_allclose(
        apply_homography(planar_pair.gt_homography.h, corrs.x),
        corrs.x_prime,
        atol=1e-9,
    )


def test_worker_count_does_not_change_the_output() -> None:
    """Pairs come back in order and identical for any thread count."""
    serial = generate_pairs(TEST_SPEC, 5, threads=1)
    parallel = generate_pairs(TEST_SPEC, 5, threads=4)

    assert [pair.pair_id for pair in parallel] == list(range(5))
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(
            a.correspondences.as_array(), b.correspondences.as_array()
        )


def test_summary_counts() -> None:
    """The summary adds up the per-pair counts."""
    pairs = generate_pairs(TEST_SPEC, 3, threads=1)
    summary = summarize(pairs)

    assert summary.pairs == 3
    assert summary.correspondences == 3 * TEST_SPEC.points_per_pair
    assert summary.injected_outliers == sum(p.injected_outliers.sum() for p in pairs)
    assert summary.labeled_outliers == sum((~p.labels).sum() for p in pairs)
    assert summary.realized_outlier_ratio == pytest.approx(
        summary.labeled_outliers / summary.correspondences
    )


@pytest.mark.parametrize(
    ("field", "value"),
    [
        ("outlier_ratio", 1.2),
        ("points_per_pair", 8),
        ("depth_far", 1.0),
        ("num_structures", 0),
    ],
)
def test_scene_spec_rejects_bad_values(field, value) -> None:
    """Out-of-range knobs name their config key."""
    with pytest.raises(InvalidConfigException) as err:
        SceneSpec(**{field: value})

    assert err.value.key == f"scene.{field}"


def test_pair_count_must_be_positive() -> None:
    """An empty dataset is a configuration error."""
    with pytest.raises(InvalidConfigException):
        generate_pairs(TEST_SPEC, 0)
