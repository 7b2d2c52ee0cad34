"""Data containers shared across the GeoMoE toolkit."""
from __future__ import annotations

from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
import math

import numpy as np

from .const import (
    DEFAULT_ADAM_BETA1,
    DEFAULT_ADAM_BETA2,
    DEFAULT_ADAM_EPSILON,
    DEFAULT_ATTENTION_HEADS,
    DEFAULT_AUC_BIN_WIDTH,
    DEFAULT_AUC_METHOD,
    DEFAULT_AUC_THRESHOLDS,
    DEFAULT_BASELINE_MAX,
    DEFAULT_BASELINE_MIN,
    DEFAULT_BATCH_SIZE,
    DEFAULT_BETA,
    DEFAULT_CHANNELS,
    DEFAULT_CLASSIFICATION_THRESHOLD,
    DEFAULT_DEPTH_FAR,
    DEFAULT_DEPTH_NEAR,
    DEFAULT_EXPERTS,
    DEFAULT_FRAME_FOCAL_PX,
    DEFAULT_FRAME_HEIGHT,
    DEFAULT_FRAME_WIDTH,
    DEFAULT_FRUSTUM_BOUND,
    DEFAULT_FRUSTUM_HALF_EXTENT,
    DEFAULT_HOMOGRAPHY_THRESHOLDS,
    DEFAULT_INIT_SEED,
    DEFAULT_ITERATIONS,
    DEFAULT_LABEL_THRESHOLD,
    DEFAULT_LAYERS,
    DEFAULT_LEARNING_RATE,
    DEFAULT_LOC_K,
    DEFAULT_LOG_INTERVAL,
    DEFAULT_LR_DECAY_START,
    DEFAULT_LR_FINAL_RATIO,
    DEFAULT_MU_INITIAL,
    DEFAULT_MU_RAMP_ITERATION,
    DEFAULT_MU_TARGET,
    DEFAULT_NOISE_SIGMA,
    DEFAULT_NUM_STRUCTURES,
    DEFAULT_OUTLIER_RATIO,
    DEFAULT_POINTS_PER_PAIR,
    DEFAULT_RANSAC_CONFIDENCE,
    DEFAULT_RANSAC_ESSENTIAL_THRESHOLD,
    DEFAULT_RANSAC_MAX_ITERATIONS,
    DEFAULT_RANSAC_SEED,
    DEFAULT_RESCALE_SCHEDULE,
    DEFAULT_ROTATION_MAGNITUDE_DEG,
    DEFAULT_SCENE_SEED,
    DEFAULT_SUB_FIELDS,
    DEFAULT_TOP_K,
    LOC_REDUCTION_FACTOR,
    MIN_CORRESPONDENCES,
    MIN_POINTS_PER_PAIR,
    RESCALED_LR_DECAY_FRACTION,
    RESCALED_MU_RAMP_FRACTION,
)
from .exceptions import InvalidConfigException, InvalidInputException


def _require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise InvalidConfigException(key, message)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole calibration of one camera, in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self) -> None:
        """Validate the focal lengths."""
        values = (self.fx, self.fy, self.cx, self.cy, self.skew)
        if not all(math.isfinite(v) for v in values):
            raise InvalidInputException("Intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputException("Focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        """Return the 3x3 calibration matrix K."""
        return np.array(
            [
                [self.fx, self.skew, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class Correspondence:
    """A single putative match between normalized image coordinates."""

    x: np.ndarray
    x_prime: np.ndarray
    label: bool | None = None

    @classmethod
    def from_values(
        cls, x: Sequence[float], x_prime: Sequence[float], label: bool | None = None
    ) -> Correspondence:
        """Build a correspondence from two coordinate pairs."""
        return cls(np.asarray(x, dtype=float), np.asarray(x_prime, dtype=float), label)


@dataclass(frozen=True)
class MotionVector:
    """Anchor point and displacement of one correspondence."""

    anchor: np.ndarray
    displacement: np.ndarray


class CorrespondenceSet:
    """N putative matches stored as arrays, with optional ground-truth labels."""

    def __init__(
        self,
        x: np.ndarray,
        x_prime: np.ndarray,
        labels: np.ndarray | None = None,
        *,
        bound: float = DEFAULT_FRUSTUM_BOUND,
    ) -> None:
        """Validate and store the coordinates."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
        x_prime = np.asarray(x_prime, dtype=np.float64).reshape(-1, 2)
        if x.shape != x_prime.shape:
            raise InvalidInputException(
                f"Mismatched coordinate counts {len(x)} and {len(x_prime)}"
            )

        finite = np.isfinite(x).all(axis=1) & np.isfinite(x_prime).all(axis=1)
        if not finite.all():
            raise InvalidInputException(
                "Non-finite correspondence coordinate", int(np.argmin(finite))
            )

        inside = (np.linalg.norm(x, axis=1) <= bound) & (
            np.linalg.norm(x_prime, axis=1) <= bound
        )
        if not inside.all():
            raise InvalidInputException(
                f"Correspondence outside the frustum bound {bound}",
                int(np.argmin(inside)),
            )

        if labels is not None:
            labels = np.asarray(labels, dtype=bool).reshape(-1)
            if len(labels) != len(x):
                raise InvalidInputException(
                    f"Expected {len(x)} labels, got {len(labels)}"
                )

        self.x = x
        self.x_prime = x_prime
        self.labels = labels
        self.bound = bound

    @classmethod
    def from_correspondences(
        cls, corrs: Iterable[Correspondence], *, bound: float = DEFAULT_FRUSTUM_BOUND
    ) -> CorrespondenceSet:
        """Build a set from individual correspondences."""
        corrs = list(corrs)
        labels = None
        if corrs and all(c.label is not None for c in corrs):
            labels = np.array([bool(c.label) for c in corrs])
        return cls(
            np.array([c.x for c in corrs]).reshape(-1, 2),
            np.array([c.x_prime for c in corrs]).reshape(-1, 2),
            labels,
            bound=bound,
        )

    @classmethod
    def from_array(
        cls, values: np.ndarray, labels: np.ndarray | None = None
    ) -> CorrespondenceSet:
        """Build a set from an N x 4 array of (x, y, x', y') rows."""
        values = np.asarray(values, dtype=np.float64).reshape(-1, 4)
        return cls(values[:, :2], values[:, 2:], labels)

    def __len__(self) -> int:
        """Return the number of correspondences."""
        return len(self.x)

    def __getitem__(self, index: int) -> Correspondence:
        """Return one correspondence."""
        label = None if self.labels is None else bool(self.labels[index])
        return Correspondence(self.x[index].copy(), self.x_prime[index].copy(), label)

    def __iter__(self) -> Iterator[Correspondence]:
        """Iterate over the individual correspondences."""
        return (self[i] for i in range(len(self)))

    def as_array(self) -> np.ndarray:
        """Return the N x 4 coordinate array."""
        return np.hstack([self.x, self.x_prime])

    def motion_array(self) -> np.ndarray:
        """Return the N x 4 motion array of (anchor, displacement) rows."""
        return np.hstack([self.x, self.x_prime - self.x])

    def subset(self, indices: np.ndarray) -> CorrespondenceSet:
        """Return the correspondences selected by a mask or index array."""
        labels = None if self.labels is None else self.labels[indices]
        return CorrespondenceSet(
            self.x[indices], self.x_prime[indices], labels, bound=self.bound
        )

    def permuted(self, order: np.ndarray) -> CorrespondenceSet:
        """Return the set with rows reordered."""
        return self.subset(np.asarray(order))


@dataclass(frozen=True, eq=False)
class EssentialMatrix:
    """Essential matrix in canonical scale and sign."""

    e: np.ndarray


@dataclass(frozen=True, eq=False)
class RelativePose:
    """Rotation and unit translation mapping camera 1 to camera 2 (x' ~ R X + t)."""

    rotation: np.ndarray
    translation: np.ndarray


@dataclass(frozen=True, eq=False)
class Homography:
    """Planar homography normalized so its largest-magnitude entry is +1."""

    h: np.ndarray


@dataclass(frozen=True)
class GeoMoEConfig:
    """Architecture of the GeoMoE network."""

    layers: int = DEFAULT_LAYERS
    channels: int = DEFAULT_CHANNELS
    sub_fields: int = DEFAULT_SUB_FIELDS
    experts: int = DEFAULT_EXPERTS
    top_k: int = DEFAULT_TOP_K
    loc_k: int = DEFAULT_LOC_K
    attention_heads: int = DEFAULT_ATTENTION_HEADS
    probability_injection: bool = True
    spatial_path: bool = True
    channel_path: bool = True
    rectifier_moe: bool = True
    init_seed: int = DEFAULT_INIT_SEED

    def __post_init__(self) -> None:
        """Validate the architecture invariants."""
        _require(self.layers >= 1, "model.layers", "must be at least 1")
        _require(self.sub_fields >= 1, "model.sub_fields", "must be at least 1")
        _require(self.experts >= 1, "model.experts", "must be at least 1")
        _require(
            1 <= self.top_k <= self.experts,
            "model.top_k",
            f"must lie in [1, experts={self.experts}]",
        )
        _require(self.loc_k >= 1, "model.loc_k", "must be at least 1")
        _require(self.init_seed >= 0, "model.init_seed", "must be non-negative")
        _require(
            self.channels >= LOC_REDUCTION_FACTOR
            and self.channels % LOC_REDUCTION_FACTOR == 0,
            "model.channels",
            f"must be a positive multiple of {LOC_REDUCTION_FACTOR}",
        )
        _require(
            self.attention_heads >= 1 and self.channels % self.attention_heads == 0,
            "model.attention_heads",
            "must divide the channel count",
        )

    @property
    def reduced_channels(self) -> int:
        """Return the LOC reduction width D/4."""
        return self.channels // LOC_REDUCTION_FACTOR

    @property
    def hidden_channels(self) -> int:
        """Return the expert hidden width D/2."""
        return max(1, self.channels // 2)


@dataclass(frozen=True)
class SceneSpec:
    """Knobs of the synthetic two-view scene generator."""

    num_structures: int = DEFAULT_NUM_STRUCTURES
    depth_near: float = DEFAULT_DEPTH_NEAR
    depth_far: float = DEFAULT_DEPTH_FAR
    rotation_magnitude_deg: float = DEFAULT_ROTATION_MAGNITUDE_DEG
    baseline_min: float = DEFAULT_BASELINE_MIN
    baseline_max: float = DEFAULT_BASELINE_MAX
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    outlier_ratio: float = DEFAULT_OUTLIER_RATIO
    points_per_pair: int = DEFAULT_POINTS_PER_PAIR
    seed: int = DEFAULT_SCENE_SEED
    frustum_half_extent: float = DEFAULT_FRUSTUM_HALF_EXTENT
    label_threshold: float = DEFAULT_LABEL_THRESHOLD

    def __post_init__(self) -> None:
        """Validate the scene invariants."""
        _require(self.num_structures >= 1, "scene.num_structures", "must be >= 1")
        _require(self.depth_near > 0, "scene.depth_near", "must be positive")
        _require(
            self.depth_far > self.depth_near, "scene.depth_far", "must exceed near"
        )
        _require(
            self.rotation_magnitude_deg >= 0,
            "scene.rotation_magnitude_deg",
            "must be non-negative",
        )
        _require(self.baseline_min > 0, "scene.baseline_min", "must be positive")
        _require(
            self.baseline_max >= self.baseline_min,
            "scene.baseline_max",
            "must be at least baseline_min",
        )
        _require(self.noise_sigma >= 0, "scene.noise_sigma", "must be non-negative")
        _require(
            0 <= self.outlier_ratio < 1, "scene.outlier_ratio", "must lie in [0, 1)"
        )
        _require(
            self.points_per_pair >= MIN_POINTS_PER_PAIR,
            "scene.points_per_pair",
            f"must be at least {MIN_POINTS_PER_PAIR}",
        )
        _require(
            0 < self.frustum_half_extent <= DEFAULT_FRUSTUM_BOUND,
            "scene.frustum_half_extent",
            f"must lie in (0, {DEFAULT_FRUSTUM_BOUND}]",
        )
        _require(self.label_threshold > 0, "scene.label_threshold", "must be > 0")


@dataclass(frozen=True)
class RansacConfig:
    """Sampling budget and acceptance threshold of a RANSAC run."""

    max_iterations: int = DEFAULT_RANSAC_MAX_ITERATIONS
    inlier_threshold: float = DEFAULT_RANSAC_ESSENTIAL_THRESHOLD
    confidence: float = DEFAULT_RANSAC_CONFIDENCE
    seed: int = DEFAULT_RANSAC_SEED

    def __post_init__(self) -> None:
        """Validate the sampling budget."""
        _require(self.max_iterations >= 1, "ransac.max_iterations", "must be >= 1")
        _require(self.seed >= 0, "ransac.seed", "must be non-negative")
        _require(self.inlier_threshold > 0, "ransac.threshold", "must be positive")
        _require(
            0 < self.confidence < 1, "ransac.confidence", "must lie in (0, 1)"
        )


@dataclass(frozen=True, eq=False)
class RansacResult:
    """Outcome of a RANSAC run."""

    model: EssentialMatrix | Homography
    inlier_mask: np.ndarray
    iterations_run: int


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the three-term training objective."""

    mu_initial: float = DEFAULT_MU_INITIAL
    mu_target: float = DEFAULT_MU_TARGET
    mu_ramp_iteration: int = DEFAULT_MU_RAMP_ITERATION
    beta: float = DEFAULT_BETA

    def __post_init__(self) -> None:
        """Validate the coefficients."""
        _require(self.mu_initial >= 0, "loss.mu_initial", "must be non-negative")
        _require(self.mu_target >= 0, "loss.mu_target", "must be non-negative")
        _require(
            self.mu_ramp_iteration >= 0, "loss.mu_ramp_iteration", "must be >= 0"
        )
        _require(self.beta >= 0, "loss.beta", "must be non-negative")

    def mu(self, iteration: int) -> float:
        """Return the regression weight at an iteration (a step function)."""
        if iteration < self.mu_ramp_iteration:
            return self.mu_initial
        return self.mu_target


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam settings and schedule of a training run."""

    iterations: int = DEFAULT_ITERATIONS
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    lr_decay_start: int = DEFAULT_LR_DECAY_START
    lr_final_ratio: float = DEFAULT_LR_FINAL_RATIO
    beta1: float = DEFAULT_ADAM_BETA1
    beta2: float = DEFAULT_ADAM_BETA2
    epsilon: float = DEFAULT_ADAM_EPSILON
    rescale_schedule: bool = DEFAULT_RESCALE_SCHEDULE
    log_interval: int = DEFAULT_LOG_INTERVAL

    def __post_init__(self) -> None:
        """Validate the optimizer settings."""
        _require(self.iterations >= 0, "training.iterations", "must be >= 0")
        _require(self.batch_size >= 1, "training.batch_size", "must be >= 1")
        _require(self.learning_rate >= 0, "training.learning_rate", "must be >= 0")
        _require(self.lr_decay_start >= 0, "training.lr_decay_start", "must be >= 0")
        _require(
            0 < self.lr_final_ratio <= 1,
            "training.lr_final_ratio",
            "must lie in (0, 1]",
        )
        _require(0 <= self.beta1 < 1, "training.beta1", "must lie in [0, 1)")
        _require(0 <= self.beta2 < 1, "training.beta2", "must lie in [0, 1)")
        _require(self.epsilon > 0, "training.epsilon", "must be positive")
        _require(self.log_interval >= 1, "training.log_interval", "must be >= 1")

    def effective_loss_weights(self, weights: LossWeights) -> LossWeights:
        """Return the loss weights with the mu ramp rescaled to the run length."""
        if not self.rescale_schedule or self.iterations >= weights.mu_ramp_iteration:
            return weights
        return LossWeights(
            mu_initial=weights.mu_initial,
            mu_target=weights.mu_target,
            mu_ramp_iteration=int(round(RESCALED_MU_RAMP_FRACTION * self.iterations)),
            beta=weights.beta,
        )

    @property
    def effective_decay_start(self) -> int:
        """Return the learning-rate decay onset for this run length."""
        if self.rescale_schedule and self.iterations < self.lr_decay_start:
            return int(round(RESCALED_LR_DECAY_FRACTION * self.iterations))
        return self.lr_decay_start

    def learning_rate_at(self, iteration: int) -> float:
        """Return the learning rate: constant, then exponential decay."""
        start = self.effective_decay_start
        if iteration < start or self.iterations <= start:
            return self.learning_rate
        progress = min(1.0, (iteration - start) / (self.iterations - start))
        return self.learning_rate * self.lr_final_ratio**progress


@dataclass(frozen=True)
class AucSpec:
    """Pose-error AUC protocol."""

    thresholds_deg: tuple[float, ...] = DEFAULT_AUC_THRESHOLDS
    bin_width_deg: float = DEFAULT_AUC_BIN_WIDTH
    method: str = DEFAULT_AUC_METHOD

    def __post_init__(self) -> None:
        """Validate the thresholds."""
        thresholds = tuple(float(t) for t in self.thresholds_deg)
        object.__setattr__(self, "thresholds_deg", thresholds)
        _require(len(thresholds) > 0, "auc.thresholds_deg", "must not be empty")
        _require(
            all(t > 0 for t in thresholds)
            and all(a < b for a, b in zip(thresholds, thresholds[1:])),
            "auc.thresholds_deg",
            "must be positive and ascending",
        )
        _require(self.bin_width_deg > 0, "auc.bin_width_deg", "must be positive")


@dataclass(frozen=True)
class EvaluationConfig:
    """Benchmark settings beyond the AUC protocol."""

    classification_threshold: float = DEFAULT_CLASSIFICATION_THRESHOLD
    homography_thresholds: tuple[float, ...] = DEFAULT_HOMOGRAPHY_THRESHOLDS
    frame_width: int = DEFAULT_FRAME_WIDTH
    frame_height: int = DEFAULT_FRAME_HEIGHT
    frame_focal_px: float = DEFAULT_FRAME_FOCAL_PX

    def __post_init__(self) -> None:
        """Validate the evaluation settings."""
        object.__setattr__(
            self,
            "homography_thresholds",
            tuple(float(t) for t in self.homography_thresholds),
        )
        _require(
            0 < self.classification_threshold < 1,
            "evaluation.classification_threshold",
            "must lie in (0, 1)",
        )
        _require(self.frame_width > 0, "evaluation.frame_width", "must be positive")
        _require(self.frame_height > 0, "evaluation.frame_height", "must be positive")
        _require(
            self.frame_focal_px > 0, "evaluation.frame_focal_px", "must be positive"
        )

    @property
    def frame_intrinsics(self) -> CameraIntrinsics:
        """Return the virtual camera used to measure corner errors in pixels."""
        return CameraIntrinsics(
            fx=self.frame_focal_px,
            fy=self.frame_focal_px,
            cx=self.frame_width / 2,
            cy=self.frame_height / 2,
        )


@dataclass(eq=False)
class GeneratedPair:
    """A synthetic image pair with its ground truth."""

    pair_id: int
    correspondences: CorrespondenceSet
    gt_essential: EssentialMatrix
    gt_pose: RelativePose
    gt_homography: Homography | None = None
    spec: SceneSpec | None = None
    injected_outliers: np.ndarray | None = field(default=None, repr=False)

    @property
    def labels(self) -> np.ndarray:
        """Return the ground-truth inlier labels."""
        if self.correspondences.labels is None:
            raise InvalidInputException("Pair has no ground-truth labels")
        return self.correspondences.labels


@dataclass(frozen=True, eq=False)
class LayerState:
    """Motion field entering a layer and the inlier weights of the layer before."""

    features: np.ndarray
    inlier_weights: np.ndarray
    layer_index: int = 0

    def __post_init__(self) -> None:
        """Validate shapes and ranges."""
        if self.features.ndim != 2:
            raise InvalidInputException("Features must be an N x D grid")
        if self.inlier_weights.shape != (self.features.shape[0],):
            raise InvalidInputException("One inlier weight per feature row expected")
        if ((self.inlier_weights < 0) | (self.inlier_weights > 1)).any():
            raise InvalidInputException("Inlier weights must lie in [0, 1]")


@dataclass(eq=False)
class AdamState:
    """First and second moment estimates of an Adam optimizer."""

    step: int = 0
    first_moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class TrainSample:
    """One labeled pair of a training batch."""

    correspondences: CorrespondenceSet
    gt_essential: EssentialMatrix
    labels: np.ndarray

    def __post_init__(self) -> None:
        """Check there is one label per correspondence and enough inliers."""
        labels = np.asarray(self.labels, dtype=bool).reshape(-1)
        object.__setattr__(self, "labels", labels)
        if len(labels) != len(self.correspondences):
            raise InvalidInputException("One label per correspondence expected")
        if labels.sum() < MIN_CORRESPONDENCES:
            raise InvalidInputException(
                f"Training pairs need {MIN_CORRESPONDENCES} labeled inliers, "
                f"got {int(labels.sum())}"
            )

    @classmethod
    def from_pair(cls, pair: GeneratedPair) -> TrainSample:
        """Build a sample from a generated pair."""
        return cls(pair.correspondences, pair.gt_essential, pair.labels)


TrainBatch = list[TrainSample]
