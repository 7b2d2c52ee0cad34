"""Central finite-difference verification of analytic backward passes."""
from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass
import logging

import numpy as np

from ..const import (
    FINITE_DIFFERENCE_ABSOLUTE_TOLERANCE,
    FINITE_DIFFERENCE_STEP,
    FINITE_DIFFERENCE_TOLERANCE,
)
from ..helpers import philox_generator

_LOGGER = logging.getLogger(__name__)

Backward = Callable[[np.ndarray], Mapping[str, np.ndarray]]
GradientOp = Callable[[dict[str, np.ndarray]], tuple[np.ndarray, Backward]]

KIND_INPUT = "input"
KIND_PARAMETER = "parameter"


@dataclass(frozen=True)
class BlockGradientCheck:
    """Comparison of analytic and numeric gradients for one named array."""

    name: str
    kind: str
    entries_checked: int
    max_relative_error: float
    worst_entry: int | None
    finite: bool
    passed: bool


@dataclass(frozen=True)
class GradientCheckReport:
    """Per-block outcome of a finite-difference check."""

    blocks: tuple[BlockGradientCheck, ...]
    step: float
    tolerance: float
    absolute_tolerance: float = FINITE_DIFFERENCE_ABSOLUTE_TOLERANCE

    @property
    def passed(self) -> bool:
        """Return True when every block passed."""
        return all(block.passed for block in self.blocks)

    @property
    def failures(self) -> tuple[str, ...]:
        """Return the names of the blocks that failed."""
        return tuple(block.name for block in self.blocks if not block.passed)

    @property
    def max_relative_error(self) -> float:
        """Return the worst relative error over all blocks."""
        return max((b.max_relative_error for b in self.blocks), default=0.0)

    def block(self, name: str) -> BlockGradientCheck:
        """Return the entry of one block."""
        for block in self.blocks:
            if block.name == name:
                return block
        raise KeyError(name)


def relative_error(
    analytic: float,
    numeric: float,
    absolute_tolerance: float = FINITE_DIFFERENCE_ABSOLUTE_TOLERANCE,
) -> float:
    """Return |a - n| / max(|a|, |n|), or 0 when |a - n| <= absolute_tolerance.

    The ratio is scale free, so a gradient of magnitude 1e-6 that is off by a
    factor of two scores 0.5. Only differences at the level of finite-difference
    noise are forgiven.
    """
    difference = abs(analytic - numeric)
    if difference <= absolute_tolerance:
        return 0.0
    return difference / max(abs(analytic), abs(numeric))


def _shifted(
    functional: Callable[[], float], flat: np.ndarray, entry: int, offset: float
) -> float:
    """Evaluate ``functional`` with one entry moved by ``offset``, then restore it."""
    original = flat[entry]
    flat[entry] = original + offset
    try:
        return functional()
    finally:
        flat[entry] = original


def finite_difference_check(
    op: GradientOp,
    inputs: Mapping[str, np.ndarray],
    params: Mapping[str, np.ndarray] | None = None,
    step: float = FINITE_DIFFERENCE_STEP,
    tolerance: float = FINITE_DIFFERENCE_TOLERANCE,
    *,
    absolute_tolerance: float = FINITE_DIFFERENCE_ABSOLUTE_TOLERANCE,
    seed: int = 0,
    max_entries_per_block: int | None = None,
) -> GradientCheckReport:
    """Check ``op``'s backward pass against central differences.

    ``op`` maps a dict of arrays to ``(output, backward)`` where ``backward``
    turns an output cotangent into cotangents keyed like the arrays; missing
    keys count as zero. The output is reduced to a scalar through a fixed
    random linear functional. An entry fails when its relative error reaches
    ``tolerance`` and its absolute difference exceeds ``absolute_tolerance``.
    A failing entry is retried with second-order one-sided differences and
    keeps the better of the errors.
    """
    params = params or {}
    kinds = {name: KIND_INPUT for name in inputs} | {
        name: KIND_PARAMETER for name in params
    }
    arrays = {
        name: np.array(value, dtype=np.float64, copy=True)
        for name, value in {**inputs, **params}.items()
    }
    rng = philox_generator(seed)

    with np.errstate(all="ignore"):
        output, backward = op(arrays)
        projection = rng.standard_normal(np.shape(output))
        analytic = {
            name: np.asarray(value) for name, value in backward(projection).items()
        }

        def functional() -> float:
            return float(np.sum(projection * op(arrays)[0]))

        center = functional()

        blocks = []
        for name, value in arrays.items():
            size = value.size
            entries = np.arange(size)
            if max_entries_per_block is not None and size > max_entries_per_block:
                entries = np.sort(
                    rng.choice(size, size=max_entries_per_block, replace=False)
                )

            gradient = analytic.get(name)
            if gradient is None:
                gradient = np.zeros_like(value)

            finite = bool(np.isfinite(output).all())
            worst, worst_entry = 0.0, None
            flat = value.reshape(-1)
            for entry in entries:
                upper = _shifted(functional, flat, entry, step)
                lower = _shifted(functional, flat, entry, -step)
                numeric = (upper - lower) / (2 * step)
                exact = float(gradient.reshape(-1)[entry])
                if not (np.isfinite(numeric) and np.isfinite(exact)):
                    finite = False
                    continue
                error = relative_error(exact, numeric, absolute_tolerance)
                if error >= tolerance:
                    # A ramp kink inside [-h, h] spoils the central difference
                    # but only one of the one-sided ones.
                    far_upper = _shifted(functional, flat, entry, 2 * step)
                    far_lower = _shifted(functional, flat, entry, -2 * step)
                    ahead = (4 * upper - 3 * center - far_upper) / (2 * step)
                    behind = (3 * center - 4 * lower + far_lower) / (2 * step)
                    one_sided = min(
                        relative_error(exact, ahead, absolute_tolerance),
                        relative_error(exact, behind, absolute_tolerance),
                    )
                    if one_sided < error:
                        _LOGGER.debug(
                            "Entry %d of %s checked one-sided: %g", entry, name, error
                        )
                        error = one_sided
                if error > worst:
                    worst, worst_entry = error, int(entry)

            if not finite:
                _LOGGER.warning("Non-finite gradient values in block %s", name)
            blocks.append(
                BlockGradientCheck(
                    name=name,
                    kind=kinds[name],
                    entries_checked=len(entries),
                    max_relative_error=worst,
                    worst_entry=worst_entry,
                    finite=finite,
                    passed=finite and worst < tolerance,
                )
            )

    return GradientCheckReport(
        blocks=tuple(blocks),
        step=step,
        tolerance=tolerance,
        absolute_tolerance=absolute_tolerance,
    )
