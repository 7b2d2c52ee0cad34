"""Small shared helpers."""
from __future__ import annotations

from collections.abc import Callable, Hashable
from typing import Any, TypeVar

import numpy as np

from .exceptions import InvalidInputException

_CallableT = TypeVar("_CallableT", bound=Callable[..., Any])


class Registry(dict):
    """Registry of items keyed by name, filled through a decorator."""

    def register(self, name: Hashable) -> Callable[[_CallableT], _CallableT]:
        """Return a decorator that registers an item under a name."""

        def decorator(func: _CallableT) -> _CallableT:
            """Register the decorated function."""
            self[name] = func
            return func

        return decorator


def philox_generator(*entropy: int) -> np.random.Generator:
    """Return a counter-based generator seeded from a list of integers."""
    sequence = np.random.SeedSequence([int(e) & 0xFFFFFFFFFFFFFFFF for e in entropy])
    return np.random.Generator(np.random.Philox(sequence))


def check_finite(values: np.ndarray, what: str) -> None:
    """Raise when an array holds a non-finite entry."""
    values = np.asarray(values)
    finite = np.isfinite(values)
    if not finite.all():
        flat = int(np.argmin(finite.reshape(len(values), -1).all(axis=1)))
        raise InvalidInputException(f"Non-finite {what}", flat)


def derive_seed(*entropy: int) -> int:
    """Mix integers into one 64-bit seed through a seed sequence."""
    sequence = np.random.SeedSequence([int(e) & 0xFFFFFFFFFFFFFFFF for e in entropy])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])
