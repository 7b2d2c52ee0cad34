"""Adam updates over a flat parameter dictionary."""
from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from ..exceptions import InvalidInputException
from ..models import AdamState, OptimizerConfig
from ..nn import Parameters


def adam_state(params: Mapping[str, np.ndarray]) -> AdamState:
    """Return zeroed moments for every parameter array."""
    return AdamState(
        step=0,
        first_moments={name: np.zeros_like(value) for name, value in params.items()},
        second_moments={name: np.zeros_like(value) for name, value in params.items()},
    )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    config: OptimizerConfig,
    learning_rate: float,
) -> tuple[Parameters, AdamState]:
    """Return the updated parameters and moments; the inputs are left untouched.

    Arrays without a gradient are treated as having a zero gradient.
    """
    missing = set(params) - set(state.first_moments)
    if missing:
        raise InvalidInputException(
            f"Optimizer state lacks moments for {', '.join(sorted(missing))}"
        )
    step = state.step + 1
    first_correction = 1.0 - config.beta1**step
    second_correction = 1.0 - config.beta2**step

    updated = {}
    first = {}
    second = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        first[name] = config.beta1 * state.first_moments[name] + (
            1.0 - config.beta1
        ) * grad
        second[name] = config.beta2 * state.second_moments[name] + (
            1.0 - config.beta2
        ) * (grad * grad)
        update = (first[name] / first_correction) / (
            np.sqrt(second[name] / second_correction) + config.epsilon
        )
        updated[name] = value - learning_rate * update
    return updated, AdamState(step=step, first_moments=first, second_moments=second)
