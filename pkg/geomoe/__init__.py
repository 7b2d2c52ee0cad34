"""Correspondence filtering with a geometry-aware mixture of experts."""
from __future__ import annotations

from .evaluation import (
    BenchmarkReport,
    classification_metrics,
    homography_accuracy,
    pose_auc,
    run_benchmark,
)
from .geometry import (
    decompose_essential,
    dlt_homography,
    symmetric_epipolar_distance,
    weighted_eight_point,
)
from .models import (
    AucSpec,
    CorrespondenceSet,
    GeneratedPair,
    GeoMoEConfig,
    LossWeights,
    OptimizerConfig,
    RansacConfig,
    SceneSpec,
)
from .network import ModelCheckpoint, load_checkpoint, model_forward, save_checkpoint
from .robust import ransac_essential, ransac_homography
from .synthetic import generate_pair, generate_pairs
from .training import train_loop

__all__ = [
    "AucSpec",
    "BenchmarkReport",
    "CorrespondenceSet",
    "GeneratedPair",
    "GeoMoEConfig",
    "LossWeights",
    "ModelCheckpoint",
    "OptimizerConfig",
    "RansacConfig",
    "SceneSpec",
    "classification_metrics",
    "decompose_essential",
    "dlt_homography",
    "generate_pair",
    "generate_pairs",
    "homography_accuracy",
    "load_checkpoint",
    "model_forward",
    "pose_auc",
    "ransac_essential",
    "ransac_homography",
    "run_benchmark",
    "save_checkpoint",
    "symmetric_epipolar_distance",
    "train_loop",
]
