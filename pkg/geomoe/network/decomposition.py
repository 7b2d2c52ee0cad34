"""Probabilistic prior-guided decomposition of a motion field into sub-fields."""
from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Any

import numpy as np

from ..const import SUB_FIELD_MASS_FLOOR
from ..models import GeoMoEConfig, LayerState
from ..nn import MLP, Block, GatCross, GradientBundle, Parameters, softmax_rows
from ..nn.layers import softmax_rows_backward
from .moe import FMoE, MoECache

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SubFieldSet:
    """Sub-field tokens of one layer with the soft assignment that produced them."""

    tokens: np.ndarray
    assignment: np.ndarray
    pooled: np.ndarray
    refined: np.ndarray
    fallback: np.ndarray

    @property
    def occupancy(self) -> np.ndarray:
        """Return the assignment mass of every sub-field."""
        return self.assignment.sum(axis=0)


@dataclass
class DecompositionCache:
    """Intermediates of one decomposition forward pass."""

    features: np.ndarray
    prior: np.ndarray | None
    score_cache: Any
    scale: np.ndarray
    moe_cache: MoECache
    attention_cache: Any
    subfields: SubFieldSet


class Decomposition(Block):
    """Soft assignment, mass-normalized pooling, expert refinement, masked attention."""

    def __init__(self, name: str, config: GeoMoEConfig) -> None:
        """Initialize the block."""
        super().__init__(name)
        channels = config.channels
        self.probability_injection = config.probability_injection
        self.score = self.add_child(
            MLP(self.key("score"), channels, config.hidden_channels, config.sub_fields)
        )
        self.moe = self.add_child(
            FMoE(self.key("moe"), channels, config.experts, config.top_k)
        )
        self.attention = self.add_child(
            GatCross(self.key("attention"), channels, config.attention_heads)
        )

    def forward(
        self,
        params: Parameters,
        features: np.ndarray,
        prior: np.ndarray,
        forced: np.ndarray | None = None,
    ) -> tuple[SubFieldSet, DecompositionCache]:
        """Decompose the field; ``prior`` is the previous layer's inlier weights."""
        logits, score_cache = self.score.forward(params, features)
        assignment = softmax_rows(logits)

        mass = assignment.sum(axis=0)
        fallback = mass < SUB_FIELD_MASS_FLOOR
        if fallback.any():
            _LOGGER.warning(
                "%s: %d sub-fields below the mass floor use unnormalized sums",
                self.name,
                int(fallback.sum()),
            )
        scale = np.where(fallback, 1.0, 1.0 / np.where(fallback, 1.0, mass))
        pooled = scale[:, None] * (assignment.T @ features)

        refined, moe_cache = self.moe.forward(params, pooled, forced)

        mask = prior if self.probability_injection else None
        keys = features if mask is None else mask[:, None] * features
        tokens, attention_cache = self.attention.forward(params, refined, keys)

        subfields = SubFieldSet(
            tokens=tokens,
            assignment=assignment,
            pooled=pooled,
            refined=refined,
            fallback=fallback,
        )
        cache = DecompositionCache(
            features=features,
            prior=mask,
            score_cache=score_cache,
            scale=scale,
            moe_cache=moe_cache,
            attention_cache=attention_cache,
            subfields=subfields,
        )
        return subfields, cache

    def backward(
        self,
        params: Parameters,
        cache: DecompositionCache,
        grad: np.ndarray,
        grads: GradientBundle,
        grad_probs: np.ndarray | None = None,
    ) -> np.ndarray:
        """Return the field cotangent; the prior weights are constants."""
        features = cache.features
        subfields = cache.subfields
        assignment = subfields.assignment

        d_refined, d_keys = self.attention.backward(
            params, cache.attention_cache, grad, grads
        )
        d_features = d_keys if cache.prior is None else cache.prior[:, None] * d_keys

        d_pooled = self.moe.backward(
            params, cache.moe_cache, d_refined, grads, grad_probs
        )
        unscaled = subfields.pooled / cache.scale[:, None]
        d_sum = cache.scale[:, None] * d_pooled
        d_scale = np.einsum("mc,mc->m", d_pooled, unscaled)
        d_mass = np.where(subfields.fallback, 0.0, -d_scale * cache.scale**2)

        d_assignment = features @ d_sum.T + d_mass[None, :]
        d_features = d_features + assignment @ d_sum
        d_logits = softmax_rows_backward(assignment, d_assignment)
        return d_features + self.score.backward(
            params, cache.score_cache, d_logits, grads
        )


def ppgd_decompose(
    state: LayerState, params: Parameters, block: Decomposition
) -> SubFieldSet:
    """Decompose a layer's motion field guided by the previous inlier weights."""
    return block.forward(params, state.features, state.inlier_weights)[0]
