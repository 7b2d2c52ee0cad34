"""The GeoMoE network, its mixture-of-experts blocks and checkpoint files."""
from __future__ import annotations

from .checkpoint import (
    ModelCheckpoint,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    load_checkpoint,
    save_checkpoint,
)
from .decomposition import Decomposition, SubFieldSet, ppgd_decompose
from .moe import FMoE, RoutingDecision, fmoe_forward, fmoe_route, select_top_k
from .network import (
    ROUTE_DECOMPOSITION,
    ROUTE_KINDS,
    ROUTE_RECTIFIER,
    ForwardDiagnostics,
    ForwardResult,
    GeoMoELayer,
    GeoMoENetwork,
    InlierHead,
    MotionInit,
    RouteKey,
    model_forward,
    model_parameter_count,
    motion_array,
    motion_init,
    predict_inliers,
)
from .rectifier import BiPath, Rectifier, bipath_enhance, mbpr_rectify

__all__ = [
    "BiPath",
    "Decomposition",
    "FMoE",
    "ForwardDiagnostics",
    "ForwardResult",
    "GeoMoELayer",
    "GeoMoENetwork",
    "InlierHead",
    "ModelCheckpoint",
    "MotionInit",
    "ROUTE_DECOMPOSITION",
    "ROUTE_KINDS",
    "ROUTE_RECTIFIER",
    "Rectifier",
    "RouteKey",
    "RoutingDecision",
    "SubFieldSet",
    "bipath_enhance",
    "checkpoint_from_bytes",
    "checkpoint_to_bytes",
    "fmoe_forward",
    "fmoe_route",
    "load_checkpoint",
    "mbpr_rectify",
    "model_forward",
    "model_parameter_count",
    "motion_array",
    "motion_init",
    "predict_inliers",
    "ppgd_decompose",
    "save_checkpoint",
    "select_top_k",
]
