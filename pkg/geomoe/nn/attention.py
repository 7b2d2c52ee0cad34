"""Residual cross-attention over a complete bipartite graph."""
from __future__ import annotations

from typing import Any

import numpy as np

from ..exceptions import InvalidInputException
from .base import Block, GradientBundle, Parameters, ParameterSpec
from .layers import softmax_rows, softmax_rows_backward

_PROJECTIONS = ("query", "key", "value", "output")


def gat_cross(
    queries: np.ndarray,
    keys: np.ndarray,
    weights: dict[str, np.ndarray],
    heads: int = 1,
) -> tuple[np.ndarray, dict[str, Any]]:
    """Update every query row with attention over all key rows.

    ``weights`` maps query/key/value/output to D x D matrices; the result is
    q + softmax(Q K^T / sqrt(d)) V W_o per head.
    """
    if keys.shape[0] == 0:
        raise InvalidInputException("Attention needs at least one key row")
    if queries.shape[1] != keys.shape[1]:
        raise InvalidInputException(
            f"Query width {queries.shape[1]} differs from key width {keys.shape[1]}"
        )

    n_q, channels = queries.shape
    n_k = keys.shape[0]
    head_dim = channels // heads
    scale = 1.0 / np.sqrt(head_dim)

    q = (queries @ weights["query"]).reshape(n_q, heads, head_dim)
    k = (keys @ weights["key"]).reshape(n_k, heads, head_dim)
    v = (keys @ weights["value"]).reshape(n_k, heads, head_dim)

    attention = softmax_rows(np.einsum("qhd,khd->hqk", q, k) * scale)
    mixed = np.einsum("hqk,khd->qhd", attention, v).reshape(n_q, channels)
    out = queries + mixed @ weights["output"]
    cache = {
        "queries": queries,
        "keys": keys,
        "q": q,
        "k": k,
        "v": v,
        "attention": attention,
        "mixed": mixed,
        "scale": scale,
    }
    return out, cache


def gat_cross_backward(
    cache: dict[str, Any], weights: dict[str, np.ndarray], grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Return (d queries, d keys, d weights) of gat_cross."""
    queries, keys = cache["queries"], cache["keys"]
    q, k, v = cache["q"], cache["k"], cache["v"]
    attention, scale = cache["attention"], cache["scale"]
    n_q, heads, head_dim = q.shape

    d_output = cache["mixed"].T @ grad
    d_mixed = (grad @ weights["output"].T).reshape(n_q, heads, head_dim)

    d_attention = np.einsum("qhd,khd->hqk", d_mixed, v)
    d_v = np.einsum("hqk,qhd->khd", attention, d_mixed)
    d_scores = softmax_rows_backward(attention, d_attention) * scale
    d_q = np.einsum("hqk,khd->qhd", d_scores, k).reshape(n_q, -1)
    d_k = np.einsum("hqk,qhd->khd", d_scores, q).reshape(len(keys), -1)
    d_v = d_v.reshape(len(keys), -1)

    d_weights = {
        "query": queries.T @ d_q,
        "key": keys.T @ d_k,
        "value": keys.T @ d_v,
        "output": d_output,
    }
    d_queries = grad + d_q @ weights["query"].T
    d_keys = d_k @ weights["key"].T + d_v @ weights["value"].T
    return d_queries, d_keys, d_weights


class GatCross(Block):
    """Cross-attention block with bias-free projections."""

    def __init__(self, name: str, channels: int, heads: int = 1) -> None:
        """Initialize the block."""
        super().__init__(name)
        if channels % heads:
            raise InvalidInputException(
                f"{heads} attention heads do not divide {channels} channels"
            )
        self.channels = channels
        self.heads = heads

    def own_parameters(self) -> dict[str, ParameterSpec]:
        """Declare the four projections."""
        return {
            name: ParameterSpec((self.channels, self.channels), fan_in=self.channels)
            for name in _PROJECTIONS
        }

    def _weights(self, params: Parameters) -> dict[str, np.ndarray]:
        return {name: params[self.key(name)] for name in _PROJECTIONS}

    def forward(
        self, params: Parameters, queries: np.ndarray, keys: np.ndarray
    ) -> tuple[np.ndarray, Any]:
        """Attend from the query rows to the key rows."""
        return gat_cross(queries, keys, self._weights(params), self.heads)

    def backward(
        self,
        params: Parameters,
        cache: Any,
        grad: np.ndarray,
        grads: GradientBundle,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Return the query and key cotangents."""
        d_queries, d_keys, d_weights = gat_cross_backward(
            cache, self._weights(params), grad
        )
        for name, value in d_weights.items():
            grads.accumulate(self.key(name), value)
        return d_queries, d_keys
