"""Parameter bookkeeping shared by every differentiable block."""
from __future__ import annotations

from collections.abc import Iterator, Mapping
from dataclasses import dataclass
import math
from typing import TypeVar

import numpy as np

from ..exceptions import InvalidInputException

Parameters = dict[str, np.ndarray]

_BlockT = TypeVar("_BlockT", bound="Block")


@dataclass(frozen=True)
class ParameterSpec:
    """Declared shape of one parameter array and how it is initialized.

    Arrays with a ``fan_in`` are drawn uniformly from +-1/sqrt(fan_in), the
    others start at zero.
    """

    shape: tuple[int, ...]
    fan_in: int | None = None

    def initial_value(self, rng: np.random.Generator) -> np.ndarray:
        """Draw the initial value of the array."""
        if self.fan_in is None:
            return np.zeros(self.shape)
        bound = 1.0 / math.sqrt(self.fan_in)
        return rng.uniform(-bound, bound, size=self.shape)


class GradientBundle(dict):
    """Cotangents of every parameter touched by a backward pass."""

    def accumulate(self, name: str, value: np.ndarray) -> None:
        """Add a cotangent contribution to a named parameter."""
        if name in self:
            self[name] = self[name] + value
        else:
            self[name] = np.array(value, dtype=np.float64, copy=True)

    def merge(self, other: Mapping[str, np.ndarray]) -> None:
        """Accumulate every entry of another bundle."""
        for name, value in other.items():
            self.accumulate(name, value)

    def scaled(self, factor: float) -> GradientBundle:
        """Return a copy with every cotangent multiplied by a factor."""
        return GradientBundle({name: value * factor for name, value in self.items()})


class Block:
    """A differentiable block owning parameters under a dotted name prefix."""

    def __init__(self, name: str) -> None:
        """Initialize the block."""
        self.name = name
        self.children: list[Block] = []

    def key(self, local: str) -> str:
        """Return the full parameter name of a local array."""
        return f"{self.name}.{local}" if self.name else local

    def own_parameters(self) -> dict[str, ParameterSpec]:
        """Return the arrays declared directly by this block, keyed by local name."""
        return {}

    def add_child(self, child: _BlockT) -> _BlockT:
        """Register a sub-block so its parameters are declared with ours."""
        self.children.append(child)
        return child

    def parameter_specs(self) -> dict[str, ParameterSpec]:
        """Return every declared array of the block tree, in declaration order."""
        specs = {self.key(local): spec for local, spec in self.own_parameters().items()}
        for child in self.children:
            specs.update(child.parameter_specs())
        return specs

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        """Return the declared shape of every array."""
        return {name: spec.shape for name, spec in self.parameter_specs().items()}

    def initialize(self, rng: np.random.Generator) -> Parameters:
        """Draw fresh parameters in declaration order."""
        return {
            name: spec.initial_value(rng)
            for name, spec in self.parameter_specs().items()
        }

    def walk(self) -> Iterator[Block]:
        """Yield the block and all of its descendants."""
        yield self
        for child in self.children:
            yield from child.walk()


def validate_parameters(block: Block, params: Mapping[str, np.ndarray]) -> None:
    """Check that every declared array is present, finite and correctly shaped."""
    for name, shape in block.parameter_shapes().items():
        if name not in params:
            raise InvalidInputException(f"Missing parameter {name}")
        value = params[name]
        if value.shape != shape:
            raise InvalidInputException(
                f"Parameter {name} has shape {value.shape}, expected {shape}"
            )
        if not np.isfinite(value).all():
            raise InvalidInputException(f"Parameter {name} is not finite")


def parameter_count(shapes: Mapping[str, tuple[int, ...]]) -> int:
    """Return the number of scalars in a set of declared shapes."""
    return int(sum(math.prod(shape) for shape in shapes.values()))
