"""Bi-path sub-field enhancement and mixture-of-experts field reconstruction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from ..models import GeoMoEConfig, LayerState
from ..nn import (
    MLP,
    Block,
    GatCross,
    GradientBundle,
    Parameters,
    avg_pool_rows,
    avg_pool_rows_backward,
)
from .decomposition import SubFieldSet
from .moe import FMoE, MoECache


@dataclass
class BiPathCache:
    """Intermediates of one bi-path pass."""

    tokens: np.ndarray
    spatial_cache: Any
    gate: np.ndarray | None
    channel_cache: Any
    fuse_cache: Any


class BiPath(Block):
    """Spatial self-attention and channel modulation fused by an MLP."""

    def __init__(self, name: str, config: GeoMoEConfig) -> None:
        """Initialize the block."""
        super().__init__(name)
        channels = config.channels
        self.spatial: GatCross | None = None
        self.channel: MLP | None = None
        if config.spatial_path:
            self.spatial = self.add_child(
                GatCross(self.key("spatial"), channels, config.attention_heads)
            )
        if config.channel_path:
            self.channel = self.add_child(
                MLP(self.key("channel"), channels, config.hidden_channels, channels)
            )
        self.fuse = self.add_child(
            MLP(self.key("fuse"), 2 * channels, channels, channels)
        )

    def forward(
        self, params: Parameters, tokens: np.ndarray
    ) -> tuple[np.ndarray, BiPathCache]:
        """Return the fused sub-field tokens."""
        spatial, spatial_cache = tokens, None
        if self.spatial is not None:
            spatial, spatial_cache = self.spatial.forward(params, tokens, tokens)

        modulated, gate, channel_cache = tokens, None, None
        if self.channel is not None:
            gate, channel_cache = self.channel.forward(params, avg_pool_rows(tokens))
            modulated = gate * tokens

        fused, fuse_cache = self.fuse.forward(
            params, np.concatenate([modulated, spatial], axis=1)
        )
        cache = BiPathCache(tokens, spatial_cache, gate, channel_cache, fuse_cache)
        return fused, cache

    def backward(
        self,
        params: Parameters,
        cache: BiPathCache,
        grad: np.ndarray,
        grads: GradientBundle,
    ) -> np.ndarray:
        """Return the token cotangent."""
        tokens = cache.tokens
        channels = tokens.shape[1]
        d_concat = self.fuse.backward(params, cache.fuse_cache, grad, grads)
        d_modulated = d_concat[:, :channels]
        d_spatial = d_concat[:, channels:]

        if self.channel is None:
            d_tokens = d_modulated
        else:
            d_gate = (d_modulated * tokens).sum(axis=0, keepdims=True)
            d_pooled = self.channel.backward(params, cache.channel_cache, d_gate, grads)
            d_tokens = cache.gate * d_modulated + avg_pool_rows_backward(
                d_pooled, len(tokens)
            )

        if self.spatial is None:
            return d_tokens + d_spatial
        d_queries, d_keys = self.spatial.backward(
            params, cache.spatial_cache, d_spatial, grads
        )
        return d_tokens + d_queries + d_keys


@dataclass
class RectifierCache:
    """Intermediates of one reconstruction pass."""

    moe_cache: MoECache
    attention_cache: Any


class Rectifier(Block):
    """Expert refinement of the sub-fields and attention back onto the field."""

    def __init__(self, name: str, config: GeoMoEConfig) -> None:
        """Initialize the block."""
        super().__init__(name)
        experts, top_k = (
            (config.experts, config.top_k) if config.rectifier_moe else (1, 1)
        )
        self.moe = self.add_child(
            FMoE(self.key("moe"), config.channels, experts, top_k)
        )
        self.attention = self.add_child(
            GatCross(self.key("attention"), config.channels, config.attention_heads)
        )

    def forward(
        self,
        params: Parameters,
        features: np.ndarray,
        subfields: np.ndarray,
        forced: np.ndarray | None = None,
    ) -> tuple[np.ndarray, RectifierCache]:
        """Return the reconstructed motion field."""
        experts_out, moe_cache = self.moe.forward(params, subfields, forced)
        rebuilt, attention_cache = self.attention.forward(params, features, experts_out)
        return rebuilt, RectifierCache(moe_cache, attention_cache)

    def backward(
        self,
        params: Parameters,
        cache: RectifierCache,
        grad: np.ndarray,
        grads: GradientBundle,
        grad_probs: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Return the field and sub-field cotangents."""
        d_features, d_experts = self.attention.backward(
            params, cache.attention_cache, grad, grads
        )
        d_subfields = self.moe.backward(
            params, cache.moe_cache, d_experts, grads, grad_probs
        )
        return d_features, d_subfields


def bipath_enhance(
    subfields: SubFieldSet, params: Parameters, block: BiPath
) -> np.ndarray:
    """Enhance the sub-field tokens through the spatial and channel paths."""
    return block.forward(params, subfields.tokens)[0]


def mbpr_rectify(
    state: LayerState, subfields: np.ndarray, params: Parameters, block: Rectifier
) -> np.ndarray:
    """Rebuild the motion field from the enhanced sub-field tokens."""
    return block.forward(params, state.features, subfields)[0]
