"""Ground-truth two-view scenes with several depth planes, noise and outliers."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging
import math
import os

import numpy as np
from scipy.spatial.transform import Rotation

from .const import GENERATION_BUDGET_FACTOR
from .exceptions import GenerationFailureException, InvalidConfigException
from .geometry import (
    essential_from_pose,
    homogeneous,
    normalize_homography,
    symmetric_epipolar_distances,
)
from .helpers import philox_generator
from .models import (
    CorrespondenceSet,
    GeneratedPair,
    Homography,
    RelativePose,
    SceneSpec,
)

_LOGGER = logging.getLogger(__name__)

MAX_PLANE_TILT_DEG = 30.0


@dataclass(frozen=True)
class ScenePlane:
    """A structure n^T X = d in the first camera frame."""

    normal: np.ndarray
    distance: float


@dataclass(frozen=True)
class GenerationSummary:
    """Counts describing a generated dataset."""

    pairs: int
    correspondences: int
    injected_outliers: int
    labeled_outliers: int
    injected_labeled_inliers: int

    @property
    def realized_outlier_ratio(self) -> float:
        """Return the fraction of correspondences labeled as outliers."""
        if self.correspondences == 0:
            return 0.0
        return self.labeled_outliers / self.correspondences


def sample_pose(
    rng: np.random.Generator, spec: SceneSpec
) -> tuple[RelativePose, np.ndarray]:
    """Return the relative pose and the scaled translation of the scene."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(0.0, spec.rotation_magnitude_deg))
    rotation = Rotation.from_rotvec(axis * angle).as_matrix()

    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    baseline = rng.uniform(spec.baseline_min, spec.baseline_max)
    return RelativePose(rotation, direction), baseline * direction


def sample_planes(rng: np.random.Generator, spec: SceneSpec) -> list[ScenePlane]:
    """Return one tilted plane per structure, each in its own depth stratum."""
    count = spec.num_structures
    span = spec.depth_far - spec.depth_near
    planes = []
    for index in range(count):
        depth = spec.depth_near + span * (index + rng.uniform(0.2, 0.8)) / count
        tilt_axis = np.array([*rng.standard_normal(2), 0.0])
        tilt_axis /= np.linalg.norm(tilt_axis)
        tilt = math.radians(rng.uniform(0.0, MAX_PLANE_TILT_DEG))
        normal = Rotation.from_rotvec(tilt_axis * tilt).apply([0.0, 0.0, 1.0])
        planes.append(ScenePlane(normal, depth * normal[2]))
    return planes


def plane_homography(
    plane: ScenePlane, rotation: np.ndarray, translation: np.ndarray
) -> Homography:
    """Return the homography R + t n^T / d induced by a plane."""
    h = rotation + np.outer(translation, plane.normal) / plane.distance
    return Homography(normalize_homography(h))


def _sample_points(
    rng: np.random.Generator,
    spec: SceneSpec,
    planes: list[ScenePlane],
    rotation: np.ndarray,
    translation: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw visible points until the pair is full or the budget runs out."""
    wanted = spec.points_per_pair
    budget = GENERATION_BUDGET_FACTOR * wanted
    extent = spec.frustum_half_extent
    normals = np.array([plane.normal for plane in planes])
    distances = np.array([plane.distance for plane in planes])

    first, second = [], []
    accepted = attempts = 0
    while accepted < wanted:
        if attempts >= budget:
            raise GenerationFailureException(
                f"Only {accepted} of {wanted} points fit the frustum after "
                f"{budget} attempts"
            )
        chunk = min(wanted, budget - attempts)
        attempts += chunk

        x = rng.uniform(-extent, extent, size=(chunk, 2))
        structure = rng.integers(len(planes), size=chunk)
        rays = homogeneous(x)
        facing = np.einsum("ij,ij->i", rays, normals[structure])
        with np.errstate(divide="ignore", invalid="ignore"):
            depth = distances[structure] / facing
        points = depth[:, None] * rays
        camera2 = points @ rotation.T + translation
        with np.errstate(divide="ignore", invalid="ignore"):
            x_prime = camera2[:, :2] / camera2[:, 2:]

        visible = (
            (depth >= spec.depth_near)
            & (depth <= spec.depth_far)
            & (camera2[:, 2] > 0)
            & (np.abs(x_prime) <= extent).all(axis=1)
        )
        take = np.flatnonzero(visible)[: wanted - accepted]
        first.append(x[take])
        second.append(x_prime[take])
        accepted += len(take)

    _LOGGER.debug("Accepted %d points after %d attempts", accepted, attempts)
    return np.concatenate(first), np.concatenate(second)


def generate_pair(spec: SceneSpec, pair_id: int = 0) -> GeneratedPair:
    """Generate one labeled pair; the stream is seeded by (spec.seed, pair_id)."""
    rng = philox_generator(spec.seed, pair_id)
    pose, translation = sample_pose(rng, spec)
    planes = sample_planes(rng, spec)
    x, x_prime = _sample_points(rng, spec, planes, pose.rotation, translation)

    count = len(x)
    extent = spec.frustum_half_extent
    if spec.noise_sigma > 0:
        x_prime = x_prime + rng.normal(0.0, spec.noise_sigma, size=x_prime.shape)

    injected = np.zeros(count, dtype=bool)
    outliers = int(math.floor(spec.outlier_ratio * count))
    if outliers:
        chosen = rng.choice(count, size=outliers, replace=False)
        injected[chosen] = True
        x_prime[chosen] = rng.uniform(-extent, extent, size=(outliers, 2))

    gt_essential = essential_from_pose(pose)
    distances = symmetric_epipolar_distances(x, x_prime, gt_essential.e)
    labels = distances < spec.label_threshold
    relabeled = int((injected & labels).sum())
    if relabeled:
        _LOGGER.debug(
            "Pair %d: %d injected outliers lie on their epipolar line",
            pair_id,
            relabeled,
        )

    gt_homography = None
    if len(planes) == 1:
        gt_homography = plane_homography(planes[0], pose.rotation, translation)

    return GeneratedPair(
        pair_id=pair_id,
        correspondences=CorrespondenceSet(x, x_prime, labels),
        gt_essential=gt_essential,
        gt_pose=pose,
        gt_homography=gt_homography,
        spec=spec,
        injected_outliers=injected,
    )


def generate_pairs(
    spec: SceneSpec, count: int, *, threads: int | None = None
) -> list[GeneratedPair]:
    """Generate ``count`` pairs in parallel, returned in pair order."""
    if count < 1:
        raise InvalidConfigException("dataset.pairs", "must be at least 1")
    workers = threads or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=workers) as executor:
        pairs = list(executor.map(lambda i: generate_pair(spec, i), range(count)))
    summary = summarize(pairs)
    _LOGGER.info(
        "Generated %d pairs, realized outlier ratio %.3f",
        summary.pairs,
        summary.realized_outlier_ratio,
    )
    return pairs


def summarize(pairs: list[GeneratedPair]) -> GenerationSummary:
    """Return the counts of a list of pairs."""
    correspondences = injected = outliers = relabeled = 0
    for pair in pairs:
        labels = pair.labels
        correspondences += len(labels)
        outliers += int((~labels).sum())
        if pair.injected_outliers is not None:
            injected += int(pair.injected_outliers.sum())
            relabeled += int((pair.injected_outliers & labels).sum())
    return GenerationSummary(
        pairs=len(pairs),
        correspondences=correspondences,
        injected_outliers=injected,
        labeled_outliers=outliers,
        injected_labeled_inliers=relabeled,
    )
