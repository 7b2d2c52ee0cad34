"""The unrolled GeoMoE correspondence filter."""
from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
import logging
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy.special import expit

from ..const import MIN_CORRESPONDENCES
from ..exceptions import InsufficientContextException, InvalidInputException
from ..geometry import Correspondences, coordinates
from ..models import GeoMoEConfig, LayerState, MotionVector
from ..nn import (
    MLP,
    Block,
    GradientBundle,
    Linear,
    LocalContext,
    Parameters,
    context_norm,
    context_norm_backward,
    parameter_count,
)
from .decomposition import Decomposition, SubFieldSet
from .moe import RoutingDecision
from .rectifier import BiPath, Rectifier

if TYPE_CHECKING:
    from .checkpoint import ModelCheckpoint

_LOGGER = logging.getLogger(__name__)

ROUTE_DECOMPOSITION = "decomposition"
ROUTE_RECTIFIER = "rectifier"
ROUTE_KINDS = (ROUTE_DECOMPOSITION, ROUTE_RECTIFIER)

RouteKey = tuple[int, str]


class MotionInit(Block):
    """Per-correspondence affine lift of the motion 4-vector, then context norm."""

    def __init__(self, name: str, channels: int) -> None:
        """Initialize the block."""
        super().__init__(name)
        self.lift = self.add_child(Linear(self.key("lift"), 4, channels))

    def forward(
        self, params: Parameters, motions: np.ndarray
    ) -> tuple[np.ndarray, Any]:
        """Return the initial motion field."""
        if motions.shape[0] < 2:
            raise InsufficientContextException(
                f"Motion initialization needs 2 correspondences, got {len(motions)}"
            )
        lifted, lift_cache = self.lift.forward(params, motions)
        return context_norm(lifted), (lift_cache, lifted)

    def backward(
        self, params: Parameters, cache: Any, grad: np.ndarray, grads: GradientBundle
    ) -> np.ndarray:
        """Return the motion cotangent."""
        lift_cache, lifted = cache
        return self.lift.backward(
            params, lift_cache, context_norm_backward(lifted, grad), grads
        )


class InlierHead(Block):
    """Per-row MLP logit squashed to an inlier probability."""

    def __init__(self, name: str, channels: int, hidden: int) -> None:
        """Initialize the block."""
        super().__init__(name)
        self.mlp = self.add_child(MLP(self.key("mlp"), channels, hidden, 1))

    def forward(
        self, params: Parameters, features: np.ndarray
    ) -> tuple[np.ndarray, Any]:
        """Return N probabilities in (0, 1)."""
        logits, cache = self.mlp.forward(params, features)
        weights = expit(logits[:, 0])
        return weights, (cache, weights)

    def backward(
        self, params: Parameters, cache: Any, grad: np.ndarray, grads: GradientBundle
    ) -> np.ndarray:
        """Return the feature cotangent."""
        mlp_cache, weights = cache
        d_logits = (grad * weights * (1.0 - weights))[:, None]
        return self.mlp.backward(params, mlp_cache, d_logits, grads)


@dataclass
class LayerCache:
    """Intermediates of one layer pass."""

    loc_cache: Any
    decomposition_cache: Any
    bipath_cache: Any
    rectifier_cache: Any
    head_cache: Any


class GeoMoELayer(Block):
    """LOC, decomposition, bi-path enhancement, rectification and inlier head."""

    def __init__(self, name: str, config: GeoMoEConfig) -> None:
        """Initialize the block."""
        super().__init__(name)
        self.loc = self.add_child(
            LocalContext(self.key("loc"), config.channels, config.loc_k)
        )
        self.decomposition = self.add_child(
            Decomposition(self.key("decomposition"), config)
        )
        self.bipath = self.add_child(BiPath(self.key("bipath"), config))
        self.rectifier = self.add_child(Rectifier(self.key("rectifier"), config))
        self.head = self.add_child(
            InlierHead(self.key("head"), config.channels, config.hidden_channels)
        )

    def forward(
        self,
        params: Parameters,
        state: LayerState,
        forced: Mapping[str, np.ndarray] | None = None,
    ) -> tuple[np.ndarray, np.ndarray, SubFieldSet, LayerCache]:
        """Return (next features, inlier weights, sub-fields, cache)."""
        forced = forced or {}
        features, loc_cache = self.loc.forward(params, state.features)
        subfields, decomposition_cache = self.decomposition.forward(
            params, features, state.inlier_weights, forced.get(ROUTE_DECOMPOSITION)
        )
        enhanced, bipath_cache = self.bipath.forward(params, subfields.tokens)
        rebuilt, rectifier_cache = self.rectifier.forward(
            params, features, enhanced, forced.get(ROUTE_RECTIFIER)
        )
        weights, head_cache = self.head.forward(params, rebuilt)
        cache = LayerCache(
            loc_cache, decomposition_cache, bipath_cache, rectifier_cache, head_cache
        )
        return rebuilt, weights, subfields, cache

    def routing(self, cache: LayerCache) -> dict[str, RoutingDecision]:
        """Return the routing decisions taken during a pass."""
        return {
            ROUTE_DECOMPOSITION: cache.decomposition_cache.moe_cache.decision,
            ROUTE_RECTIFIER: cache.rectifier_cache.moe_cache.decision,
        }

    def evaluations(self, cache: LayerCache) -> dict[str, int]:
        """Return the expert evaluations performed by each mixture."""
        return {
            ROUTE_DECOMPOSITION: cache.decomposition_cache.moe_cache.evaluations,
            ROUTE_RECTIFIER: cache.rectifier_cache.moe_cache.evaluations,
        }

    def backward(
        self,
        params: Parameters,
        cache: LayerCache,
        grad_features: np.ndarray | None,
        grad_weights: np.ndarray | None,
        grads: GradientBundle,
        grad_probs: Mapping[str, np.ndarray] | None = None,
    ) -> np.ndarray:
        """Return the cotangent of the features entering the layer."""
        grad_probs = grad_probs or {}
        rows = cache.head_cache[1].shape[0]
        channels = self.loc.channels
        d_rebuilt = (
            np.zeros((rows, channels)) if grad_features is None else grad_features
        )
        if grad_weights is not None:
            d_rebuilt = d_rebuilt + self.head.backward(
                params, cache.head_cache, grad_weights, grads
            )

        d_features, d_enhanced = self.rectifier.backward(
            params,
            cache.rectifier_cache,
            d_rebuilt,
            grads,
            grad_probs.get(ROUTE_RECTIFIER),
        )
        d_tokens = self.bipath.backward(params, cache.bipath_cache, d_enhanced, grads)
        d_features = d_features + self.decomposition.backward(
            params,
            cache.decomposition_cache,
            d_tokens,
            grads,
            grad_probs.get(ROUTE_DECOMPOSITION),
        )
        return self.loc.backward(params, cache.loc_cache, d_features, grads)


@dataclass
class ForwardDiagnostics:
    """Routing and occupancy statistics of one forward pass."""

    routing: dict[RouteKey, RoutingDecision] = field(default_factory=dict)
    sparse: dict[RouteKey, bool] = field(default_factory=dict)
    occupancy: list[np.ndarray] = field(default_factory=list)
    fallback_tokens: list[int] = field(default_factory=list)
    expert_evaluations: dict[str, int] = field(default_factory=dict)
    expected_evaluations: dict[str, int] = field(default_factory=dict)

    @property
    def routing_histograms(self) -> dict[RouteKey, np.ndarray]:
        """Return how many tokens each expert received per mixture."""
        return {key: d.expert_counts for key, d in self.routing.items()}

    @property
    def expert_mass(self) -> dict[RouteKey, np.ndarray]:
        """Return the mean full-softmax routing mass per expert per mixture."""
        return {key: d.probs.mean(axis=0) for key, d in self.routing.items()}

    @property
    def selections(self) -> dict[RouteKey, np.ndarray]:
        """Return the expert selections, usable to freeze routing."""
        return {key: d.selected for key, d in self.routing.items()}

    @property
    def balance_probs(self) -> dict[RouteKey, np.ndarray]:
        """Return the routing probabilities of every mixture with several experts."""
        return {
            key: decision.probs
            for key, decision in self.routing.items()
            if self.sparse[key]
        }

    @property
    def sparsity_holds(self) -> bool:
        """Return True when every mixture evaluated exactly k experts per token."""
        return self.expert_evaluations == self.expected_evaluations


@dataclass
class ForwardResult:
    """Per-layer inlier weights of a pass plus what backward needs."""

    layer_weights: list[np.ndarray]
    diagnostics: ForwardDiagnostics
    motions: np.ndarray
    init_cache: Any = None
    layer_caches: list[LayerCache] = field(default_factory=list)

    @property
    def weights(self) -> np.ndarray:
        """Return the weights of the last layer."""
        return self.layer_weights[-1]


class GeoMoENetwork(Block):
    """Motion initialization followed by L GeoMoE layers."""

    def __init__(self, config: GeoMoEConfig) -> None:
        """Initialize the block tree of a configuration."""
        super().__init__("")
        self.config = config
        self.init = self.add_child(MotionInit("init", config.channels))
        self.layers = [
            self.add_child(GeoMoELayer(f"layer{index}", config))
            for index in range(config.layers)
        ]

    @property
    def min_correspondences(self) -> int:
        """Return the smallest accepted set size."""
        return max(MIN_CORRESPONDENCES, self.config.loc_k + 1)

    def forward(
        self,
        params: Parameters,
        motions: np.ndarray,
        forced: Mapping[RouteKey, np.ndarray] | None = None,
    ) -> ForwardResult:
        """Run the network on an N x 4 motion array."""
        motions = np.asarray(motions, dtype=np.float64)
        if motions.ndim != 2 or motions.shape[1] != 4:
            raise InvalidInputException("Motions must form an N x 4 array")
        if len(motions) < self.min_correspondences:
            raise InsufficientContextException(
                f"Need at least {self.min_correspondences} correspondences, "
                f"got {len(motions)}"
            )
        forced = forced or {}
        config = self.config

        features, init_cache = self.init.forward(params, motions)
        weights = np.ones(len(motions))
        diagnostics = ForwardDiagnostics()
        result = ForwardResult([], diagnostics, motions, init_cache)

        for index, layer in enumerate(self.layers):
            state = LayerState(features, weights, index)
            layer_forced = {
                kind: forced[(index, kind)]
                for kind in ROUTE_KINDS
                if (index, kind) in forced
            }
            features, weights, subfields, cache = layer.forward(
                params, state, layer_forced
            )
            result.layer_weights.append(weights)
            result.layer_caches.append(cache)

            for kind, decision in layer.routing(cache).items():
                diagnostics.routing[(index, kind)] = decision
            diagnostics.sparse[(index, ROUTE_DECOMPOSITION)] = (
                layer.decomposition.moe.sparse
            )
            diagnostics.sparse[(index, ROUTE_RECTIFIER)] = layer.rectifier.moe.sparse
            for kind, count in layer.evaluations(cache).items():
                diagnostics.expert_evaluations[kind] = (
                    diagnostics.expert_evaluations.get(kind, 0) + count
                )
            diagnostics.occupancy.append(subfields.occupancy)
            diagnostics.fallback_tokens.append(int(subfields.fallback.sum()))

        rectifier_k = config.top_k if config.rectifier_moe else 1
        diagnostics.expected_evaluations = {
            ROUTE_DECOMPOSITION: config.layers * config.sub_fields * config.top_k,
            ROUTE_RECTIFIER: config.layers * config.sub_fields * rectifier_k,
        }
        if not diagnostics.sparsity_holds:
            _LOGGER.error(
                "Expert evaluations %s differ from the expected %s",
                diagnostics.expert_evaluations,
                diagnostics.expected_evaluations,
            )
        return result

    def backward(
        self,
        params: Parameters,
        result: ForwardResult,
        grad_layer_weights: list[np.ndarray | None],
        grad_probs: Mapping[RouteKey, np.ndarray] | None = None,
    ) -> GradientBundle:
        """Backpropagate cotangents of the per-layer weights and routing probs."""
        grad_probs = grad_probs or {}
        grads = GradientBundle()
        d_features = None
        for index in reversed(range(len(self.layers))):
            layer_probs = {
                kind: grad_probs[(index, kind)]
                for kind in ROUTE_KINDS
                if (index, kind) in grad_probs
            }
            d_features = self.layers[index].backward(
                params,
                result.layer_caches[index],
                d_features,
                grad_layer_weights[index],
                grads,
                layer_probs,
            )
        self.init.backward(params, result.init_cache, d_features, grads)
        return grads


def motion_array(motions: Sequence[MotionVector] | np.ndarray) -> np.ndarray:
    """Stack motion vectors into an N x 4 array of (anchor, displacement) rows."""
    if isinstance(motions, np.ndarray):
        return np.asarray(motions, dtype=np.float64).reshape(-1, 4)
    return np.array(
        [np.concatenate([m.anchor, m.displacement]) for m in motions], dtype=np.float64
    ).reshape(-1, 4)


def motion_init(
    motions: Sequence[MotionVector] | np.ndarray, params: Parameters, channels: int
) -> np.ndarray:
    """Lift motion vectors to the initial N x D motion field."""
    return MotionInit("init", channels).forward(params, motion_array(motions))[0]


def predict_inliers(
    features: np.ndarray, params: Parameters, block: InlierHead
) -> np.ndarray:
    """Return the inlier probability of every feature row."""
    return block.forward(params, features)[0]


def model_parameter_count(config: GeoMoEConfig) -> int:
    """Return the number of learned scalars of a configuration."""
    return parameter_count(GeoMoENetwork(config).parameter_shapes())


def model_forward(
    corrs: Correspondences,
    checkpoint: ModelCheckpoint,
    forced: Mapping[RouteKey, np.ndarray] | None = None,
) -> tuple[list[np.ndarray], np.ndarray, ForwardDiagnostics]:
    """Return (per-layer weights, final weights, diagnostics) for a set."""
    x, x_prime = coordinates(corrs)
    motions = np.hstack([x, x_prime - x])
    result = checkpoint.network.forward(checkpoint.params, motions, forced)
    return result.layer_weights, result.weights, result.diagnostics
