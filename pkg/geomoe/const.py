"""Constants for the GeoMoE correspondence-filtering toolkit."""
from __future__ import annotations

import logging
from typing import Final

DOMAIN: Final = "geomoe"
LOGGER: logging.Logger = logging.getLogger(__package__)

# Geometry tolerances
DEFAULT_FRUSTUM_BOUND: Final = 10.0
WEIGHT_FLOOR: Final = 1e-5
EIGEN_GAP_TOLERANCE: Final = 1e-12
CANONICAL_SIGN_TOLERANCE: Final = 1e-9
PARALLEL_RAY_ANGLE: Final = 1e-8
COLLINEAR_AREA_TOLERANCE: Final = 1e-10
HOMOGENEOUS_W_TOLERANCE: Final = 1e-12

# Robust estimation
DEFAULT_RANSAC_MAX_ITERATIONS: Final = 1000
DEFAULT_RANSAC_ESSENTIAL_THRESHOLD: Final = 1e-4
DEFAULT_RANSAC_HOMOGRAPHY_THRESHOLD: Final = 5e-3
DEFAULT_RANSAC_CONFIDENCE: Final = 0.999
DEFAULT_RANSAC_SEED: Final = 0
RANSAC_ATTEMPT_FACTOR: Final = 20
ESSENTIAL_SAMPLE_SIZE: Final = 8
HOMOGRAPHY_SAMPLE_SIZE: Final = 4

# Neural substrate
VARIANCE_EPSILON: Final = 1e-5
LOC_REDUCTION_FACTOR: Final = 4
FINITE_DIFFERENCE_STEP: Final = 1e-5
FINITE_DIFFERENCE_TOLERANCE: Final = 1e-6
FINITE_DIFFERENCE_ABSOLUTE_TOLERANCE: Final = 1e-8
DEFAULT_INIT_SEED: Final = 0

# GeoMoE model
DEFAULT_LAYERS: Final = 8
DEFAULT_CHANNELS: Final = 128
DEFAULT_SUB_FIELDS: Final = 48
DEFAULT_EXPERTS: Final = 4
DEFAULT_TOP_K: Final = 2
DEFAULT_LOC_K: Final = 8
DEFAULT_ATTENTION_HEADS: Final = 1
SUB_FIELD_MASS_FLOOR: Final = 1e-8
MIN_CORRESPONDENCES: Final = 8

# On-disk formats
CHECKPOINT_MAGIC: Final = b"GMOE"
CHECKPOINT_FORMAT_VERSION: Final = 1
DATASET_MAGIC: Final = b"GMDS"
DATASET_FORMAT_VERSION: Final = 1

# Training
DEFAULT_MU_INITIAL: Final = 0.0
DEFAULT_MU_TARGET: Final = 0.5
DEFAULT_MU_RAMP_ITERATION: Final = 20000
DEFAULT_BETA: Final = 0.01
LOG_CLAMP: Final = 1e-12
REGRESSION_CLAMP: Final = 0.25
EIGENVECTOR_GAP_GUARD: Final = 1e-8
DEFAULT_BATCH_SIZE: Final = 8
DEFAULT_LEARNING_RATE: Final = 1e-4
DEFAULT_ITERATIONS: Final = 5000
DEFAULT_LR_DECAY_START: Final = 80000
DEFAULT_LR_FINAL_RATIO: Final = 0.1
DEFAULT_ADAM_BETA1: Final = 0.9
DEFAULT_ADAM_BETA2: Final = 0.999
DEFAULT_ADAM_EPSILON: Final = 1e-8
DEFAULT_RESCALE_SCHEDULE: Final = True
DEFAULT_LOG_INTERVAL: Final = 100
DEFAULT_TRAINING_SEED: Final = 0
# Fractions of the run length used when the schedule is rescaled to desk scale
RESCALED_MU_RAMP_FRACTION: Final = 0.2
RESCALED_LR_DECAY_FRACTION: Final = 0.16

# Synthetic data
DEFAULT_NUM_STRUCTURES: Final = 3
DEFAULT_DEPTH_NEAR: Final = 2.0
DEFAULT_DEPTH_FAR: Final = 10.0
DEFAULT_ROTATION_MAGNITUDE_DEG: Final = 15.0
DEFAULT_BASELINE_MIN: Final = 0.5
DEFAULT_BASELINE_MAX: Final = 1.5
DEFAULT_NOISE_SIGMA: Final = 1e-3
DEFAULT_OUTLIER_RATIO: Final = 0.5
DEFAULT_POINTS_PER_PAIR: Final = 512
DEFAULT_SCENE_SEED: Final = 0
DEFAULT_FRUSTUM_HALF_EXTENT: Final = 1.0
DEFAULT_LABEL_THRESHOLD: Final = 1e-4
DEFAULT_PAIR_COUNT: Final = 100
GENERATION_BUDGET_FACTOR: Final = 50
MIN_POINTS_PER_PAIR: Final = 16

# Evaluation
DEFAULT_AUC_THRESHOLDS: Final = (5.0, 10.0, 20.0)
DEFAULT_AUC_BIN_WIDTH: Final = 1.0
DEFAULT_AUC_METHOD: Final = "histogram"
AUC_METHODS: Final = ("histogram", "trapezoid")
DEFAULT_HOMOGRAPHY_THRESHOLDS: Final = (3.0, 5.0, 10.0)
DEFAULT_CLASSIFICATION_THRESHOLD: Final = 0.5
DEFAULT_FRAME_WIDTH: Final = 640
DEFAULT_FRAME_HEIGHT: Final = 480
DEFAULT_FRAME_FOCAL_PX: Final = 320.0

# Estimator arms
ARM_RAW: Final = "raw"
ARM_RANSAC: Final = "ransac"
ARM_GEOMOE: Final = "geomoe"
ARM_GEOMOE_RANSAC: Final = "geomoe+ransac"
ARM_ORACLE: Final = "oracle"
ALL_ARMS: Final = (ARM_RAW, ARM_RANSAC, ARM_GEOMOE, ARM_GEOMOE_RANSAC, ARM_ORACLE)
DEFAULT_ARMS: Final = (ARM_RAW, ARM_RANSAC)

# CLI exit codes
EXIT_OK: Final = 0
EXIT_UNEXPECTED: Final = 1
EXIT_CONFIG_ERROR: Final = 2
EXIT_DATA_ERROR: Final = 3
EXIT_NUMERICAL_FAILURE: Final = 4

# Run configuration sections
CONF_MODEL = "model"
CONF_SCENE = "scene"
CONF_DATASET = "dataset"
CONF_LOSS = "loss"
CONF_TRAINING = "training"
CONF_RANSAC = "ransac"
CONF_AUC = "auc"
CONF_EVALUATION = "evaluation"
CONF_RUN = "run"

# One table of every config key with its default; schemas and --help read it
CONFIG_DEFAULTS: Final[dict[str, dict[str, object]]] = {
    CONF_MODEL: {
        "layers": DEFAULT_LAYERS,
        "channels": DEFAULT_CHANNELS,
        "sub_fields": DEFAULT_SUB_FIELDS,
        "experts": DEFAULT_EXPERTS,
        "top_k": DEFAULT_TOP_K,
        "loc_k": DEFAULT_LOC_K,
        "attention_heads": DEFAULT_ATTENTION_HEADS,
        "probability_injection": True,
        "spatial_path": True,
        "channel_path": True,
        "rectifier_moe": True,
        "init_seed": DEFAULT_INIT_SEED,
    },
    CONF_SCENE: {
        "num_structures": DEFAULT_NUM_STRUCTURES,
        "depth_near": DEFAULT_DEPTH_NEAR,
        "depth_far": DEFAULT_DEPTH_FAR,
        "rotation_magnitude_deg": DEFAULT_ROTATION_MAGNITUDE_DEG,
        "baseline_min": DEFAULT_BASELINE_MIN,
        "baseline_max": DEFAULT_BASELINE_MAX,
        "noise_sigma": DEFAULT_NOISE_SIGMA,
        "outlier_ratio": DEFAULT_OUTLIER_RATIO,
        "points_per_pair": DEFAULT_POINTS_PER_PAIR,
        "seed": DEFAULT_SCENE_SEED,
        "frustum_half_extent": DEFAULT_FRUSTUM_HALF_EXTENT,
        "label_threshold": DEFAULT_LABEL_THRESHOLD,
    },
    CONF_DATASET: {
        "pairs": DEFAULT_PAIR_COUNT,
    },
    CONF_LOSS: {
        "mu_initial": DEFAULT_MU_INITIAL,
        "mu_target": DEFAULT_MU_TARGET,
        "mu_ramp_iteration": DEFAULT_MU_RAMP_ITERATION,
        "beta": DEFAULT_BETA,
    },
    CONF_TRAINING: {
        "iterations": DEFAULT_ITERATIONS,
        "batch_size": DEFAULT_BATCH_SIZE,
        "learning_rate": DEFAULT_LEARNING_RATE,
        "lr_decay_start": DEFAULT_LR_DECAY_START,
        "lr_final_ratio": DEFAULT_LR_FINAL_RATIO,
        "beta1": DEFAULT_ADAM_BETA1,
        "beta2": DEFAULT_ADAM_BETA2,
        "epsilon": DEFAULT_ADAM_EPSILON,
        "rescale_schedule": DEFAULT_RESCALE_SCHEDULE,
        "log_interval": DEFAULT_LOG_INTERVAL,
        "seed": DEFAULT_TRAINING_SEED,
    },
    CONF_RANSAC: {
        "max_iterations": DEFAULT_RANSAC_MAX_ITERATIONS,
        "essential_threshold": DEFAULT_RANSAC_ESSENTIAL_THRESHOLD,
        "homography_threshold": DEFAULT_RANSAC_HOMOGRAPHY_THRESHOLD,
        "confidence": DEFAULT_RANSAC_CONFIDENCE,
        "seed": DEFAULT_RANSAC_SEED,
    },
    CONF_AUC: {
        "thresholds_deg": DEFAULT_AUC_THRESHOLDS,
        "bin_width_deg": DEFAULT_AUC_BIN_WIDTH,
        "method": DEFAULT_AUC_METHOD,
    },
    CONF_EVALUATION: {
        "arms": DEFAULT_ARMS,
        "classification_threshold": DEFAULT_CLASSIFICATION_THRESHOLD,
        "homography_thresholds": DEFAULT_HOMOGRAPHY_THRESHOLDS,
        "frame_width": DEFAULT_FRAME_WIDTH,
        "frame_height": DEFAULT_FRAME_HEIGHT,
        "frame_focal_px": DEFAULT_FRAME_FOCAL_PX,
    },
    CONF_RUN: {
        # 0 uses every available core
        "threads": 0,
    },
}
