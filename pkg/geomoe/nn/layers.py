"""Dense maps, normalization, softmax and pooling with their backward passes."""
from __future__ import annotations

from typing import Any

import numpy as np

from ..const import VARIANCE_EPSILON
from ..exceptions import InsufficientContextException, InvalidInputException
from .base import Block, GradientBundle, Parameters, ParameterSpec


def linear(
    values: np.ndarray, weight: np.ndarray, bias: np.ndarray | None
) -> np.ndarray:
    """Apply x W + b to the last axis of any array."""
    if values.shape[-1] != weight.shape[0]:
        raise InvalidInputException(
            f"Linear map expects {weight.shape[0]} channels, got {values.shape[-1]}"
        )
    out = values @ weight
    if bias is not None:
        out = out + bias
    return out


def linear_backward(
    values: np.ndarray, weight: np.ndarray, grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (d values, d weight, d bias)."""
    flat_in = values.reshape(-1, weight.shape[0])
    flat_grad = grad.reshape(-1, weight.shape[1])
    return grad @ weight.T, flat_in.T @ flat_grad, flat_grad.sum(axis=0)


def relu(values: np.ndarray) -> np.ndarray:
    """Return max(0, x)."""
    return np.maximum(values, 0.0)


def relu_backward(pre: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Route the cotangent through the active units."""
    return grad * (pre > 0)


def context_norm(values: np.ndarray) -> np.ndarray:
    """Standardize every channel across the rows of an R x C grid."""
    if values.shape[0] < 2:
        raise InsufficientContextException(
            f"Context normalization needs at least 2 rows, got {values.shape[0]}"
        )
    centered = values - values.mean(axis=0)
    return centered / np.sqrt(centered.var(axis=0) + VARIANCE_EPSILON)


def context_norm_backward(values: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Backward pass of context_norm."""
    rows = values.shape[0]
    centered = values - values.mean(axis=0)
    inv_std = 1.0 / np.sqrt(centered.var(axis=0) + VARIANCE_EPSILON)
    normalized = centered * inv_std
    return (inv_std / rows) * (
        rows * grad
        - grad.sum(axis=0)
        - normalized * (grad * normalized).sum(axis=0)
    )


def softmax_rows(values: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    shifted = np.exp(values - values.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def softmax_rows_backward(output: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Backward pass of softmax_rows given its output."""
    return output * (grad - (grad * output).sum(axis=-1, keepdims=True))


def avg_pool_rows(values: np.ndarray) -> np.ndarray:
    """Return the 1 x C mean over rows."""
    if values.shape[0] == 0:
        raise InvalidInputException("Cannot pool an empty grid")
    return values.mean(axis=0, keepdims=True)


def avg_pool_rows_backward(grad: np.ndarray, rows: int) -> np.ndarray:
    """Spread the pooled cotangent evenly over the rows."""
    return np.repeat(grad / rows, rows, axis=0)


class Linear(Block):
    """Affine map on the last axis."""

    def __init__(
        self, name: str, in_channels: int, out_channels: int, bias: bool = True
    ) -> None:
        """Initialize the block."""
        super().__init__(name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.bias = bias

    def own_parameters(self) -> dict[str, ParameterSpec]:
        """Declare the weight and the optional bias."""
        specs = {
            "weight": ParameterSpec(
                (self.in_channels, self.out_channels), fan_in=self.in_channels
            )
        }
        if self.bias:
            specs["bias"] = ParameterSpec((self.out_channels,))
        return specs

    def forward(self, params: Parameters, values: np.ndarray) -> tuple[np.ndarray, Any]:
        """Apply the map."""
        bias = params[self.key("bias")] if self.bias else None
        return linear(values, params[self.key("weight")], bias), values

    def backward(
        self,
        params: Parameters,
        cache: Any,
        grad: np.ndarray,
        grads: GradientBundle,
    ) -> np.ndarray:
        """Accumulate parameter cotangents and return the input cotangent."""
        d_values, d_weight, d_bias = linear_backward(
            cache, params[self.key("weight")], grad
        )
        grads.accumulate(self.key("weight"), d_weight)
        if self.bias:
            grads.accumulate(self.key("bias"), d_bias)
        return d_values


class MLP(Block):
    """Two affine layers with a ramp in between."""

    def __init__(
        self, name: str, in_channels: int, hidden_channels: int, out_channels: int
    ) -> None:
        """Initialize the block."""
        super().__init__(name)
        self.fc1 = self.add_child(
            Linear(self.key("fc1"), in_channels, hidden_channels)
        )
        self.fc2 = self.add_child(
            Linear(self.key("fc2"), hidden_channels, out_channels)
        )

    def forward(self, params: Parameters, values: np.ndarray) -> tuple[np.ndarray, Any]:
        """Apply fc2(relu(fc1(x)))."""
        pre, cache1 = self.fc1.forward(params, values)
        out, cache2 = self.fc2.forward(params, relu(pre))
        return out, (cache1, pre, cache2)

    def backward(
        self,
        params: Parameters,
        cache: Any,
        grad: np.ndarray,
        grads: GradientBundle,
    ) -> np.ndarray:
        """Backward pass through both affine maps."""
        cache1, pre, cache2 = cache
        d_hidden = self.fc2.backward(params, cache2, grad, grads)
        return self.fc1.backward(params, cache1, relu_backward(pre, d_hidden), grads)
