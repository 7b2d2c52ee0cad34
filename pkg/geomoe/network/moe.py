"""Sparse mixture of experts over sub-field tokens."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..exceptions import InvalidInputException
from ..nn import MLP, Block, GradientBundle, Parameters, softmax_rows
from ..nn.layers import softmax_rows_backward


@dataclass(frozen=True, eq=False)
class RoutingDecision:
    """Full routing probabilities and the sparse selection drawn from them."""

    probs: np.ndarray
    selected: np.ndarray
    mix_weights: np.ndarray

    @property
    def expert_counts(self) -> np.ndarray:
        """Return how many tokens each expert received."""
        return np.bincount(self.selected.reshape(-1), minlength=self.probs.shape[1])


def select_top_k(
    probs: np.ndarray, top_k: int, forced: np.ndarray | None = None
) -> RoutingDecision:
    """Pick the k most probable experts per token, ties to the lowest index.

    ``forced`` replaces the argmax with a fixed M x k selection so the mixture
    is a smooth function of the probabilities around the evaluation point.
    """
    experts = probs.shape[1]
    if not 1 <= top_k <= experts:
        raise InvalidInputException(f"top_k={top_k} outside [1, {experts}]")
    if forced is None:
        selected = np.argsort(-probs, axis=1, kind="stable")[:, :top_k]
    else:
        selected = np.asarray(forced, dtype=np.intp)
        if selected.shape != (probs.shape[0], top_k):
            raise InvalidInputException("Forced selection has the wrong shape")
    picked = np.take_along_axis(probs, selected, axis=1)
    return RoutingDecision(
        probs=probs,
        selected=selected,
        mix_weights=picked / picked.sum(axis=1, keepdims=True),
    )


@dataclass
class _ExpertTrace:
    rows: np.ndarray
    slots: np.ndarray
    cache: Any
    output: np.ndarray


@dataclass
class MoECache:
    """Intermediates of one mixture forward pass."""

    tokens: np.ndarray
    router_cache: Any
    decision: RoutingDecision
    traces: dict[int, _ExpertTrace] = field(default_factory=dict)

    @property
    def evaluations(self) -> int:
        """Return the number of (token, expert) evaluations performed."""
        return sum(len(trace.rows) for trace in self.traces.values())


class FMoE(Block):
    """Router MLP plus residual feed-forward experts of hidden width D/2."""

    def __init__(
        self, name: str, channels: int, experts: int, top_k: int
    ) -> None:
        """Initialize the block."""
        super().__init__(name)
        if not 1 <= top_k <= experts:
            raise InvalidInputException(f"top_k={top_k} outside [1, {experts}]")
        hidden = max(1, channels // 2)
        self.channels = channels
        self.num_experts = experts
        self.top_k = top_k
        self.router = self.add_child(
            MLP(self.key("router"), channels, hidden, experts)
        )
        self.experts = [
            self.add_child(MLP(self.key(f"expert{index}"), channels, hidden, channels))
            for index in range(experts)
        ]

    @property
    def sparse(self) -> bool:
        """Return True when there is more than one expert to route between."""
        return self.num_experts > 1

    def route(
        self, params: Parameters, tokens: np.ndarray, forced: np.ndarray | None = None
    ) -> tuple[RoutingDecision, Any]:
        """Score the tokens and select their experts."""
        logits, router_cache = self.router.forward(params, tokens)
        return select_top_k(softmax_rows(logits), self.top_k, forced), router_cache

    def mix(
        self, params: Parameters, tokens: np.ndarray, decision: RoutingDecision
    ) -> tuple[np.ndarray, dict[int, _ExpertTrace]]:
        """Evaluate only the selected experts and blend their outputs."""
        out = np.zeros_like(tokens)
        traces = {}
        for expert_index, expert in enumerate(self.experts):
            rows, slots = np.nonzero(decision.selected == expert_index)
            if len(rows) == 0:
                continue
            update, cache = expert.forward(params, tokens[rows])
            output = tokens[rows] + update
            out[rows] += decision.mix_weights[rows, slots, None] * output
            traces[expert_index] = _ExpertTrace(rows, slots, cache, output)
        return out, traces

    def forward(
        self, params: Parameters, tokens: np.ndarray, forced: np.ndarray | None = None
    ) -> tuple[np.ndarray, MoECache]:
        """Route and mix."""
        decision, router_cache = self.route(params, tokens, forced)
        out, traces = self.mix(params, tokens, decision)
        return out, MoECache(tokens, router_cache, decision, traces)

    def backward(
        self,
        params: Parameters,
        cache: MoECache,
        grad: np.ndarray,
        grads: GradientBundle,
        grad_probs: np.ndarray | None = None,
    ) -> np.ndarray:
        """Return the token cotangent; ``grad_probs`` adds a cotangent on the probs."""
        decision = cache.decision
        d_tokens = np.zeros_like(cache.tokens)
        d_mix = np.zeros_like(decision.mix_weights)

        for expert_index, trace in cache.traces.items():
            upstream = grad[trace.rows]
            d_mix[trace.rows, trace.slots] = np.einsum(
                "ij,ij->i", upstream, trace.output
            )
            d_output = decision.mix_weights[trace.rows, trace.slots, None] * upstream
            d_tokens[trace.rows] += d_output + self.experts[expert_index].backward(
                params, trace.cache, d_output, grads
            )

        picked = np.take_along_axis(decision.probs, decision.selected, axis=1)
        total = picked.sum(axis=1, keepdims=True)
        d_picked = (
            d_mix - (d_mix * decision.mix_weights).sum(axis=1, keepdims=True)
        ) / total

        d_probs = np.zeros_like(decision.probs)
        np.put_along_axis(d_probs, decision.selected, d_picked, axis=1)
        if grad_probs is not None:
            d_probs = d_probs + grad_probs

        d_logits = softmax_rows_backward(decision.probs, d_probs)
        return d_tokens + self.router.backward(
            params, cache.router_cache, d_logits, grads
        )


def fmoe_route(
    tokens: np.ndarray, params: Parameters, block: FMoE
) -> RoutingDecision:
    """Return the routing decision of a mixture block for the given tokens."""
    return block.route(params, tokens)[0]


def fmoe_forward(
    tokens: np.ndarray,
    decision: RoutingDecision,
    params: Parameters,
    block: FMoE,
) -> np.ndarray:
    """Blend the selected experts' outputs for a given routing decision."""
    if decision.probs.shape != (tokens.shape[0], block.num_experts):
        raise InvalidInputException("Routing decision does not match the experts")
    return block.mix(params, tokens, decision)[0]
