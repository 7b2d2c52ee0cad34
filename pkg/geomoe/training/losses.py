"""The three-term training objective and its gradients."""
from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
import logging

import numpy as np

from ..const import (
    DEFAULT_LABEL_THRESHOLD,
    EIGENVECTOR_GAP_GUARD,
    ESSENTIAL_SAMPLE_SIZE,
    LOG_CLAMP,
    REGRESSION_CLAMP,
    WEIGHT_FLOOR,
)
from ..exceptions import DegenerateConfigurationException, InvalidInputException
from ..geometry import (
    Correspondences,
    coordinates,
    epipolar_rows,
    homogeneous,
    project_to_essential,
    project_to_essential_backward,
    symmetric_epipolar_distances,
)
from ..models import EssentialMatrix, LossWeights, TrainSample
from ..network import RouteKey

_LOGGER = logging.getLogger(__name__)

FLAG_NO_INLIERS = "absent_inlier_class"
FLAG_NO_OUTLIERS = "absent_outlier_class"
FLAG_EIGEN_GAP = "eigen_gap_below_guard"
FLAG_RANK_DEFICIENT = "too_few_weighted_points"

# Keeps the third coordinate of an epipolar line out of the point-line distance
_LINE_PLANE = np.array([1.0, 1.0, 0.0])


def _vector(values: np.ndarray | Iterable, dtype: type) -> np.ndarray:
    if not isinstance(values, np.ndarray):
        values = list(values)
    return np.asarray(values, dtype=dtype).reshape(-1)


@dataclass(frozen=True, eq=False)
class LossTerm:
    """Value of one loss term, its gradient with respect to the weights, flags."""

    value: float
    gradient: np.ndarray
    flags: tuple[str, ...] = ()

    @property
    def skipped(self) -> bool:
        """Return True when the term was left out of the objective."""
        return FLAG_EIGEN_GAP in self.flags or FLAG_RANK_DEFICIENT in self.flags


def classification_term(
    predicted: np.ndarray | Iterable[float], labels: np.ndarray | Iterable[bool]
) -> LossTerm:
    """Class-balanced binary cross-entropy with clamped log arguments."""
    predicted = _vector(predicted, np.float64)
    labels = _vector(labels, bool)
    if predicted.shape != labels.shape:
        raise InvalidInputException("One label per prediction expected")

    positive = np.maximum(predicted, LOG_CLAMP)
    negative = np.maximum(1.0 - predicted, LOG_CLAMP)
    inliers = int(labels.sum())
    outliers = len(labels) - inliers

    flags = []
    if inliers == 0:
        flags.append(FLAG_NO_INLIERS)
    if outliers == 0:
        flags.append(FLAG_NO_OUTLIERS)
    terms = 2 - len(flags)
    if terms == 0:
        return LossTerm(0.0, np.zeros_like(predicted), tuple(flags))

    value = 0.0
    gradient = np.zeros_like(predicted)
    if inliers:
        value += -np.log(positive[labels]).sum() / inliers
        gradient[labels] = np.where(
            predicted[labels] > LOG_CLAMP, -1.0 / (inliers * positive[labels]), 0.0
        )
    if outliers:
        value += -np.log(negative[~labels]).sum() / outliers
        gradient[~labels] = np.where(
            1.0 - predicted[~labels] > LOG_CLAMP,
            1.0 / (outliers * negative[~labels]),
            0.0,
        )
    return LossTerm(float(value / terms), gradient / terms, tuple(flags))


def classification_loss(
    predicted: np.ndarray | Iterable[float], labels: np.ndarray | Iterable[bool]
) -> float:
    """Return the class-balanced cross-entropy of inlier predictions."""
    return classification_term(predicted, labels).value


def clamped_epipolar_loss(
    e: np.ndarray, x: np.ndarray, x_prime: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean clamped symmetric epipolar distance and its gradient in E's 9 entries."""
    matrix = e.reshape(3, 3)
    distances = symmetric_epipolar_distances(x, x_prime, matrix)
    clamped = np.minimum(distances, REGRESSION_CLAMP)
    value = float(clamped.mean())

    hx = homogeneous(x)
    hxp = homogeneous(x_prime)
    lines1 = hx @ matrix.T
    lines2 = hxp @ matrix
    residual = np.einsum("ij,ij->i", hxp, lines1)
    den1 = lines1[:, 0] ** 2 + lines1[:, 1] ** 2
    den2 = lines2[:, 0] ** 2 + lines2[:, 1] ** 2
    active = (distances < REGRESSION_CLAMP) & (den1 > 0) & (den2 > 0)
    if not active.any():
        return value, np.zeros(9)

    hx, hxp = hx[active], hxp[active]
    lines1, lines2 = lines1[active], lines2[active]
    residual, den1, den2 = residual[active], den1[active], den2[active]

    gradient = np.einsum(
        "i,ia,ib->ab", 2 * residual * (1 / den1 + 1 / den2), hxp, hx
    )
    gradient -= np.einsum(
        "i,ia,ib->ab", 2 * residual**2 / den1**2, lines1 * _LINE_PLANE, hx
    )
    gradient -= np.einsum(
        "i,ia,ib->ab", 2 * residual**2 / den2**2, hxp, lines2 * _LINE_PLANE
    )
    return value, gradient.reshape(9) / len(distances)


def regression_term(
    weights: np.ndarray, x: np.ndarray, x_prime: np.ndarray, inliers: np.ndarray
) -> LossTerm:
    """Differentiable weighted eight-point followed by the clamped residual loss.

    The loss is taken on the rank-2 projection of the smallest eigenvector of
    the weighted normal matrix, the same matrix ``weighted_eight_point``
    returns. The gradient reaches the weights through the projection and the
    first-order perturbation of that eigenvector.
    """
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    zeros = np.zeros_like(weights)
    if not inliers.any():
        return LossTerm(0.0, zeros, (FLAG_NO_INLIERS,))
    if int((weights > WEIGHT_FLOOR).sum()) < ESSENTIAL_SAMPLE_SIZE:
        return LossTerm(0.0, zeros, (FLAG_RANK_DEFICIENT,))

    rows = epipolar_rows(x, x_prime)
    normal = rows.T @ (weights[:, None] * rows)
    eigenvalues, eigenvectors = np.linalg.eigh(normal)
    if eigenvalues[1] - eigenvalues[0] < EIGENVECTOR_GAP_GUARD:
        return LossTerm(0.0, zeros, (FLAG_EIGEN_GAP,))

    e = eigenvectors[:, 0]
    try:
        essential = project_to_essential(e)
        value, d_essential = clamped_epipolar_loss(
            essential, x[inliers], x_prime[inliers]
        )
        d_e = project_to_essential_backward(e, d_essential).reshape(9)
    except DegenerateConfigurationException as err:
        _LOGGER.debug("Skipping the regression term: %s", err)
        return LossTerm(0.0, zeros, (FLAG_EIGEN_GAP,))
    coefficients = (eigenvectors[:, 1:].T @ d_e) / (eigenvalues[0] - eigenvalues[1:])
    direction = eigenvectors[:, 1:] @ coefficients
    return LossTerm(value, (rows @ direction) * (rows @ e))


def essential_regression_loss(
    weights: np.ndarray | Iterable[float],
    corrs: Correspondences,
    gt: EssentialMatrix,
    labels: np.ndarray | None = None,
) -> float:
    """Return the regression loss of the essential matrix estimated from weights.

    Inliers come from ``labels``, else from the set's labels, else from the
    ground-truth residual threshold.
    """
    x, x_prime = coordinates(corrs)
    if labels is None:
        labels = getattr(corrs, "labels", None)
    if labels is None:
        distances = symmetric_epipolar_distances(x, x_prime, gt.e)
        labels = distances < DEFAULT_LABEL_THRESHOLD
    return regression_term(
        _vector(weights, np.float64),
        x,
        x_prime,
        _vector(labels, bool),
    ).value


def load_balance_term(
    routing_probs: Sequence[np.ndarray],
) -> tuple[float, list[np.ndarray]]:
    """Return the balance penalty and its gradient for every routing matrix."""
    if not routing_probs:
        return 0.0, []
    instances = len(routing_probs)
    value = 0.0
    gradients = []
    for probs in routing_probs:
        tokens, experts = probs.shape
        load = probs.mean(axis=0)
        value += float((load**2).sum()) / experts
        gradients.append(
            np.broadcast_to(2 * load / (experts * tokens * instances), probs.shape)
        )
    return value / instances, [np.array(g) for g in gradients]


def load_balance_loss(routing_probs: Sequence[np.ndarray]) -> float:
    """Return (1/T) sum_t mean_t^2 averaged over mixture instances."""
    return load_balance_term(routing_probs)[0]


@dataclass(frozen=True, eq=False)
class TotalLoss:
    """The per-pair objective, its components and the cotangents backward needs."""

    value: float
    classification: float
    regression: float
    load: float
    mu: float
    grad_layer_weights: list[np.ndarray]
    grad_probs: dict[RouteKey, np.ndarray]
    flags: tuple[str, ...] = field(default=())


def total_loss(
    layer_weights: Sequence[np.ndarray],
    routing_probs: Mapping[RouteKey, np.ndarray],
    sample: TrainSample,
    weights: LossWeights,
    iteration: int,
) -> TotalLoss:
    """Sum over layers of classification and mu * regression, plus beta/L * load."""
    layers = len(layer_weights)
    if layers == 0:
        raise InvalidInputException("At least one layer of weights is needed")
    mu = weights.mu(iteration)
    x, x_prime = coordinates(sample.correspondences)

    classification = 0.0
    regression = 0.0
    grad_layer_weights = []
    flags = []
    for index, layer in enumerate(layer_weights):
        cls = classification_term(layer, sample.labels)
        reg = regression_term(layer, x, x_prime, sample.labels)
        classification += cls.value
        regression += reg.value
        grad_layer_weights.append(cls.gradient + mu * reg.gradient)
        flags.extend(f"layer{index}:{flag}" for flag in cls.flags + reg.flags)

    keys = list(routing_probs)
    load, load_gradients = load_balance_term([routing_probs[key] for key in keys])
    balance = weights.beta / layers
    grad_probs = {key: balance * g for key, g in zip(keys, load_gradients)}

    value = classification + mu * regression + balance * load
    if flags:
        _LOGGER.debug("Loss flags: %s", ", ".join(flags))
    return TotalLoss(
        value=value,
        classification=classification,
        regression=regression,
        load=load,
        mu=mu,
        grad_layer_weights=grad_layer_weights,
        grad_probs=grad_probs,
        flags=tuple(flags),
    )
