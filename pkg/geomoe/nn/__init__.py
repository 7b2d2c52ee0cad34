"""Differentiable set-network building blocks with analytic gradients."""
from __future__ import annotations

from .attention import GatCross, gat_cross, gat_cross_backward
from .base import (
    Block,
    GradientBundle,
    Parameters,
    ParameterSpec,
    parameter_count,
    validate_parameters,
)
from .gradcheck import GradientCheckReport, finite_difference_check
from .layers import (
    MLP,
    Linear,
    avg_pool_rows,
    avg_pool_rows_backward,
    context_norm,
    context_norm_backward,
    linear,
    linear_backward,
    relu,
    softmax_rows,
    softmax_rows_backward,
)
from .local_context import LocalContext, knn_neighborhoods, loc_forward

__all__ = [
    "Block",
    "GatCross",
    "GradientBundle",
    "GradientCheckReport",
    "Linear",
    "LocalContext",
    "MLP",
    "ParameterSpec",
    "Parameters",
    "avg_pool_rows",
    "avg_pool_rows_backward",
    "context_norm",
    "context_norm_backward",
    "finite_difference_check",
    "gat_cross",
    "gat_cross_backward",
    "knn_neighborhoods",
    "linear",
    "linear_backward",
    "loc_forward",
    "parameter_count",
    "relu",
    "softmax_rows",
    "softmax_rows_backward",
    "validate_parameters",
]
