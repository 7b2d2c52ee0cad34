"""Neighborhood search and the local orthogonal context block."""
from __future__ import annotations

from typing import Any

import numpy as np

from ..const import LOC_REDUCTION_FACTOR
from ..exceptions import InsufficientContextException, InvalidInputException
from .base import Block, GradientBundle, Parameters
from .layers import MLP, Linear


def knn_neighborhoods(field: np.ndarray, k: int) -> np.ndarray:
    """Return an R x (k+1) index table: each row itself, then its k nearest rows.

    Distances are Euclidean in feature space; ties go to the lowest index.
    """
    rows = field.shape[0]
    if k < 0:
        raise InvalidInputException(f"Neighborhood size must be >= 0, got {k}")
    if k >= rows:
        raise InsufficientContextException(
            f"Neighborhood size {k} needs more than {rows} rows"
        )

    squared = np.einsum("ij,ij->i", field, field)
    distances = squared[:, None] + squared[None, :] - 2.0 * (field @ field.T)
    np.fill_diagonal(distances, -np.inf)
    return np.argsort(distances, axis=1, kind="stable")[:, : k + 1]


class LocalContext(Block):
    """Two-stage aggregation of feature differences over a KNN neighborhood.

    Channels are reduced to D/4, the (k+1) x D/4 difference block of every row
    goes through a residual channel MLP, is transposed, goes through a residual
    neighbor MLP and is collapsed to one value per channel before being
    projected back and added to the input.
    """

    def __init__(self, name: str, channels: int, k: int) -> None:
        """Initialize the block."""
        super().__init__(name)
        if channels % LOC_REDUCTION_FACTOR:
            raise InvalidInputException(
                f"Channel count {channels} is not a multiple of {LOC_REDUCTION_FACTOR}"
            )
        reduced = channels // LOC_REDUCTION_FACTOR
        slots = k + 1
        self.channels = channels
        self.k = k
        self.reduce = self.add_child(Linear(self.key("reduce"), channels, reduced))
        self.channel_mlp = self.add_child(
            MLP(self.key("channel_mlp"), reduced, reduced, reduced)
        )
        self.neighbor_mlp = self.add_child(
            MLP(self.key("neighbor_mlp"), slots, slots, slots)
        )
        self.collapse = self.add_child(MLP(self.key("collapse"), slots, slots, 1))
        self.expand = self.add_child(Linear(self.key("expand"), reduced, channels))

    def forward(
        self,
        params: Parameters,
        field: np.ndarray,
        neighbors: np.ndarray | None = None,
    ) -> tuple[np.ndarray, Any]:
        """Return the refined field; ``neighbors`` freezes the KNN table."""
        if field.shape[1] != self.channels:
            raise InvalidInputException(
                f"Expected {self.channels} channels, got {field.shape[1]}"
            )
        if neighbors is None:
            neighbors = knn_neighborhoods(field, self.k)
        elif neighbors.shape != (field.shape[0], self.k + 1):
            raise InvalidInputException("Neighbor table does not match the field")

        reduced, reduce_cache = self.reduce.forward(params, field)
        differences = reduced[:, None, :] - reduced[neighbors]

        update, channel_cache = self.channel_mlp.forward(params, differences)
        transposed = (differences + update).transpose(0, 2, 1)

        update, neighbor_cache = self.neighbor_mlp.forward(params, transposed)
        collapsed, collapse_cache = self.collapse.forward(params, transposed + update)

        lifted, expand_cache = self.expand.forward(params, collapsed[..., 0])
        cache = (
            neighbors,
            reduce_cache,
            channel_cache,
            neighbor_cache,
            collapse_cache,
            expand_cache,
        )
        return field + lifted, cache

    def backward(
        self,
        params: Parameters,
        cache: Any,
        grad: np.ndarray,
        grads: GradientBundle,
    ) -> np.ndarray:
        """Return the field cotangent; the neighbor table is a constant."""
        (
            neighbors,
            reduce_cache,
            channel_cache,
            neighbor_cache,
            collapse_cache,
            expand_cache,
        ) = cache

        d_collapsed = self.expand.backward(params, expand_cache, grad, grads)
        d_stage2 = self.collapse.backward(
            params, collapse_cache, d_collapsed[..., None], grads
        )
        d_transposed = d_stage2 + self.neighbor_mlp.backward(
            params, neighbor_cache, d_stage2, grads
        )
        d_stage1 = d_transposed.transpose(0, 2, 1)
        d_differences = d_stage1 + self.channel_mlp.backward(
            params, channel_cache, d_stage1, grads
        )

        d_reduced = d_differences.sum(axis=1)
        np.add.at(d_reduced, neighbors, -d_differences)
        return grad + self.reduce.backward(params, reduce_cache, d_reduced, grads)


def loc_forward(
    field: np.ndarray, params: Parameters, k: int, name: str = "loc"
) -> np.ndarray:
    """Run a LocalContext block named ``name`` on a field."""
    block = LocalContext(name, field.shape[1], k)
    return block.forward(params, field)[0]
