"""Seeded RANSAC for essential matrices and homographies."""
from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
import logging
import math

import numpy as np

from .const import (
    ESSENTIAL_SAMPLE_SIZE,
    HOMOGRAPHY_SAMPLE_SIZE,
    RANSAC_ATTEMPT_FACTOR,
)
from .exceptions import (
    DegenerateConfigurationException,
    EstimationFailureException,
    RankDeficientException,
)
from .geometry import (
    Correspondences,
    coordinates,
    estimate_essential,
    estimate_homography,
    symmetric_epipolar_distances,
    transfer_errors,
)
from .helpers import philox_generator
from .models import EssentialMatrix, Homography, RansacConfig, RansacResult

_LOGGER = logging.getLogger(__name__)

Model = EssentialMatrix | Homography

_FIT_ERRORS = (DegenerateConfigurationException, RankDeficientException)


@dataclass(frozen=True)
class RansacModelDescription:
    """How one model family is sampled, fitted and scored."""

    key: str
    sample_size: int
    fit: Callable[[np.ndarray, np.ndarray], Model]
    residuals: Callable[[Model, np.ndarray, np.ndarray], np.ndarray]


def _fit_essential(x: np.ndarray, x_prime: np.ndarray) -> EssentialMatrix:
    return estimate_essential(x, x_prime, np.ones(len(x)))


def _essential_residuals(
    model: EssentialMatrix, x: np.ndarray, x_prime: np.ndarray
) -> np.ndarray:
    return symmetric_epipolar_distances(x, x_prime, model.e)


def _homography_residuals(
    model: Homography, x: np.ndarray, x_prime: np.ndarray
) -> np.ndarray:
    return transfer_errors(model.h, x, x_prime)


ESSENTIAL_MODEL = RansacModelDescription(
    key="essential",
    sample_size=ESSENTIAL_SAMPLE_SIZE,
    fit=_fit_essential,
    residuals=_essential_residuals,
)

HOMOGRAPHY_MODEL = RansacModelDescription(
    key="homography",
    sample_size=HOMOGRAPHY_SAMPLE_SIZE,
    fit=estimate_homography,
    residuals=_homography_residuals,
)


def adaptive_iterations(
    inlier_ratio: float, sample_size: int, confidence: float
) -> float:
    """Return the trials log(1 - confidence) / log(1 - ratio^s) for a clean draw."""
    clean = inlier_ratio**sample_size
    if clean >= 1.0:
        return 0.0
    if clean <= 0.0:
        return math.inf
    return math.ceil(math.log(1 - confidence) / math.log1p(-clean))


def run_ransac(
    description: RansacModelDescription,
    corrs: Correspondences,
    config: RansacConfig,
) -> RansacResult:
    """Best-consensus search over minimal samples followed by one consensus refit."""
    x, x_prime = coordinates(corrs)
    count = len(x)
    size = description.sample_size
    if count < size:
        raise EstimationFailureException(
            f"{description.key} RANSAC needs {size} correspondences, got {count}"
        )

    rng = philox_generator(config.seed)
    best_model: Model | None = None
    best_count = -1
    needed: float = config.max_iterations
    iterations = 0
    attempts = 0
    max_attempts = RANSAC_ATTEMPT_FACTOR * config.max_iterations

    while iterations < min(needed, config.max_iterations) and attempts < max_attempts:
        attempts += 1
        sample = rng.choice(count, size=size, replace=False)
        try:
            model = description.fit(x[sample], x_prime[sample])
        except _FIT_ERRORS as err:
            _LOGGER.debug("Discarded degenerate sample %s: %s", sample, err)
            continue

        iterations += 1
        consensus = int(
            (description.residuals(model, x, x_prime) < config.inlier_threshold).sum()
        )
        if consensus > best_count:
            best_model, best_count = model, consensus
            needed = adaptive_iterations(consensus / count, size, config.confidence)

    if best_model is None:
        raise EstimationFailureException(
            f"No valid {description.key} sample in {attempts} attempts"
        )

    model = best_model
    mask = description.residuals(model, x, x_prime) < config.inlier_threshold
    if mask.sum() >= size:
        try:
            refit = description.fit(x[mask], x_prime[mask])
        except _FIT_ERRORS as err:
            _LOGGER.debug("Consensus refit failed, keeping the best sample: %s", err)
        else:
            refit_mask = (
                description.residuals(refit, x, x_prime) < config.inlier_threshold
            )
            if refit_mask.sum() >= best_count:
                model, mask = refit, refit_mask

    _LOGGER.debug(
        "%s RANSAC: %d iterations, %d attempts, %d/%d inliers",
        description.key,
        iterations,
        attempts,
        int(mask.sum()),
        count,
    )
    return RansacResult(model=model, inlier_mask=mask, iterations_run=iterations)


def ransac_essential(corrs: Correspondences, config: RansacConfig) -> RansacResult:
    """Robustly estimate an essential matrix from 8-point samples."""
    return run_ransac(ESSENTIAL_MODEL, corrs, config)


def ransac_homography(corrs: Correspondences, config: RansacConfig) -> RansacResult:
    """Robustly estimate a homography from 4-point samples."""
    return run_ransac(HOMOGRAPHY_MODEL, corrs, config)
