"""Tests for the differentiable building blocks."""
from __future__ import annotations

import numpy as np
import pytest

from geomoe.exceptions import InsufficientContextException, InvalidInputException
from geomoe.helpers import philox_generator
from geomoe.nn import (
    MLP,
    GatCross,
    GradientBundle,
    Linear,
    LocalContext,
    avg_pool_rows,
    avg_pool_rows_backward,
    context_norm,
    context_norm_backward,
    finite_difference_check,
    knn_neighborhoods,
    softmax_rows,
    softmax_rows_backward,
)
from geomoe.nn.gradcheck import relative_error

TEST_TOLERANCE = 1e-6
TEST_BLOCK_TOLERANCE = 1e-5
TEST_SEEDS = range(20)


def _grid(rows: int, channels: int, seed: int = 0) -> np.ndarray:
    return philox_generator(seed).standard_normal((rows, channels))


def _jitter_biases(params: dict, seed: int) -> dict:
    """Move zero-initialized biases off the ramp kink."""
    rng = philox_generator(seed)
    for name, value in params.items():
        if name.endswith(".bias"):
            params[name] = rng.uniform(-0.1, 0.1, size=value.shape)
    return params


def _unary_op(block, **forward_kwargs):
    """Wrap a one-input block as a gradient-check op."""

    def op(arrays):
        out, cache = block.forward(arrays, arrays["input"], **forward_kwargs)

        def backward(grad):
            grads = GradientBundle()
            d_input = block.backward(arrays, cache, grad, grads)
            return {"input": d_input, **grads}

        return out, backward

    return op


@pytest.mark.parametrize("seed", TEST_SEEDS)
def test_linear_gradients(seed: int) -> None:
    """The affine map passes the check at the tight tolerance."""
    block = Linear("lin", 2, 3)
    params = _jitter_biases(block.initialize(philox_generator(seed)), seed)

    report = finite_difference_check(
        _unary_op(block),
        {"input": _grid(3, 2, seed)},
        params,
        tolerance=TEST_TOLERANCE,
    )

    assert report.passed, report.failures
    assert [b.name for b in report.blocks] == ["input", "lin.weight", "lin.bias"]


@pytest.mark.parametrize("seed", TEST_SEEDS)
def test_mlp_gradients(seed: int) -> None:
    """The two-layer ramp network passes the check."""
    block = MLP("mlp", 4, 6, 3)
    params = _jitter_biases(block.initialize(philox_generator(seed)), seed)

    report = finite_difference_check(
        _unary_op(block),
        {"input": _grid(5, 4, seed + 100)},
        params,
        tolerance=TEST_BLOCK_TOLERANCE,
    )

    assert report.passed, report.failures
    assert report.max_relative_error < TEST_BLOCK_TOLERANCE


def test_small_gradients_are_compared_relatively() -> None:
    """A gradient of order 1e-6 that is twice too large fails the check."""

    def scaled(factor: float):
        def op(arrays):
            values = arrays["input"]
            return 1e-6 * values, lambda grad: {"input": factor * 1e-6 * grad}

        return op

    inputs = {"input": _grid(4, 3)}
    wrong = finite_difference_check(scaled(2.0), inputs)
    right = finite_difference_check(scaled(1.0), inputs)

    assert wrong.failures == ("input",)
    assert wrong.max_relative_error == pytest.approx(0.5)
    assert right.passed
    assert relative_error(2e-6, 1e-6) == pytest.approx(0.5)
    assert relative_error(1.0, 1.0 + 1e-9) == 0.0


def test_corrupted_gradient_names_the_block() -> None:
    """A wrong backward pass is reported against the array it corrupts."""
    block = Linear("lin", 2, 3)
    params = block.initialize(philox_generator(1))
    op = _unary_op(block)

    def corrupted(arrays):
        out, backward = op(arrays)

        def wrong(grad):
            result = backward(grad)
            result["lin.weight"] = result["lin.weight"] * 1.5
            return result

        return out, wrong

    report = finite_difference_check(corrupted, {"input": _grid(3, 2)}, params)

    assert not report.passed
    assert report.failures == ("lin.weight",)
    assert report.block("lin.weight").max_relative_error > TEST_TOLERANCE
    assert report.block("input").passed


def test_context_norm_statistics() -> None:
    """Every channel comes out centred with close to unit variance."""
    values = _grid(32, 3) * np.array([1.0, 10.0, 0.1]) + 5.0
    normalized = context_norm(values)

    np.testing.assert_allclose(normalized.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(normalized[:, :2].var(axis=0), 1.0, atol=1e-4)


def test_context_norm_of_a_constant_channel() -> None:
    """A constant channel maps to zeros, not NaN."""
    values = np.column_stack([np.full(6, 3.0), np.arange(6.0)])
    normalized = context_norm(values)

    np.testing.assert_array_equal(normalized[:, 0], 0.0)
    assert np.isfinite(normalized).all()


def test_context_norm_needs_two_rows() -> None:
    """A single row has no context."""
    with pytest.raises(InsufficientContextException):
        context_norm(np.ones((1, 4)))


@pytest.mark.parametrize("seed", TEST_SEEDS)
def test_context_norm_gradients(seed: int) -> None:
    """The normalization backward pass passes the check."""

    def op(arrays):
        values = arrays["input"]
        return context_norm(values), lambda grad: {
            "input": context_norm_backward(values, grad)
        }

    report = finite_difference_check(
        op, {"input": _grid(6, 2, seed)}, tolerance=TEST_BLOCK_TOLERANCE
    )

    assert report.passed, report.max_relative_error


def test_softmax_rows() -> None:
    """Rows sum to one and large logits stay finite."""
    logits = np.array([[0.0, 1.0, 2.0], [1000.0, 1000.0, 999.0]])
    probs = softmax_rows(logits)

    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    assert np.isfinite(probs).all()
    assert probs[1, 0] == pytest.approx(probs[1, 1])


@pytest.mark.parametrize("seed", TEST_SEEDS)
def test_softmax_gradients(seed: int) -> None:
    """The backward pass from the output matches central differences."""

    def op(arrays):
        out = softmax_rows(arrays["input"])
        return out, lambda grad: {"input": softmax_rows_backward(out, grad)}

    report = finite_difference_check(
        op, {"input": _grid(3, 5, seed)}, tolerance=TEST_BLOCK_TOLERANCE
    )

    assert report.passed, report.max_relative_error
    assert [b.kind for b in report.blocks] == ["input"]


@pytest.mark.parametrize("seed", TEST_SEEDS)
def test_avg_pool_gradients(seed: int) -> None:
    """Pooling spreads the cotangent evenly."""

    def op(arrays):
        values = arrays["input"]
        return avg_pool_rows(values), lambda grad: {
            "input": avg_pool_rows_backward(grad, values.shape[0])
        }

    report = finite_difference_check(
        op, {"input": _grid(6, 3, seed)}, tolerance=TEST_BLOCK_TOLERANCE
    )

    assert report.passed
    with pytest.raises(InvalidInputException):
        avg_pool_rows(np.zeros((0, 3)))


@pytest.mark.parametrize("seed", TEST_SEEDS)
@pytest.mark.parametrize("heads", [1, 2])
def test_gat_cross_gradients(heads: int, seed: int) -> None:
    """Query, key and projection cotangents pass the check."""
    block = GatCross("gat", 4, heads)
    params = block.initialize(philox_generator(seed))

    def op(arrays):
        out, cache = block.forward(arrays, arrays["queries"], arrays["keys"])

        def backward(grad):
            grads = GradientBundle()
            d_queries, d_keys = block.backward(arrays, cache, grad, grads)
            return {"queries": d_queries, "keys": d_keys, **grads}

        return out, backward

    report = finite_difference_check(
        op,
        {"queries": _grid(5, 4, seed + 100), "keys": _grid(3, 4, seed + 200)},
        params,
        tolerance=TEST_BLOCK_TOLERANCE,
    )

    assert report.passed, report.failures
    assert report.max_relative_error < TEST_BLOCK_TOLERANCE


def test_gat_cross_with_a_single_key() -> None:
    """One key row gets all the attention."""
    block = GatCross("gat", 4)
    params = block.initialize(philox_generator(9))
    queries, key = _grid(3, 4, 1), _grid(1, 4, 2)

    out, _ = block.forward(params, queries, key)
    expected = queries + (key @ params["gat.value"]) @ params["gat.output"]

    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_gat_cross_with_zero_output_projection() -> None:
    """A zero output projection leaves the queries untouched."""
    block = GatCross("gat", 4)
    params = block.initialize(philox_generator(9))
    params["gat.output"] = np.zeros((4, 4))
    queries = _grid(3, 4, 1)

    out, _ = block.forward(params, queries, _grid(6, 4, 2))

    np.testing.assert_array_equal(out, queries)


def test_gat_cross_rejects_bad_shapes() -> None:
    """Heads must divide the width and keys must be present."""
    with pytest.raises(InvalidInputException):
        GatCross("gat", 6, heads=4)

    block = GatCross("gat", 4)
    params = block.initialize(philox_generator(0))
    with pytest.raises(InvalidInputException):
        block.forward(params, _grid(3, 4), np.zeros((0, 4)))


def test_knn_puts_each_row_first() -> None:
    """Rows on a line find their closest neighbours after themselves."""
    field = np.array([[0.0], [1.0], [2.0], [10.0]])

    np.testing.assert_array_equal(
        knn_neighborhoods(field, 2),
        [[0, 1, 2], [1, 0, 2], [2, 1, 0], [3, 2, 1]],
    )


def test_knn_needs_enough_rows() -> None:
    """k must be smaller than the row count."""
    with pytest.raises(InsufficientContextException):
        knn_neighborhoods(_grid(4, 2), 4)


@pytest.mark.parametrize("seed", TEST_SEEDS)
def test_local_context_gradients(seed: int) -> None:
    """With a frozen neighbour table the block passes the check."""
    block = LocalContext("loc", 8, 3)
    params = _jitter_biases(block.initialize(philox_generator(seed)), seed)
    field = _grid(7, 8, seed + 100)
    neighbors = knn_neighborhoods(field, 3)

    report = finite_difference_check(
        _unary_op(block, neighbors=neighbors),
        {"input": field},
        params,
        tolerance=TEST_BLOCK_TOLERANCE,
    )

    assert report.passed, report.failures
    assert report.max_relative_error < TEST_BLOCK_TOLERANCE


def test_local_context_is_residual() -> None:
    """The output has the input shape and a zero projection returns the input."""
    block = LocalContext("loc", 8, 2)
    params = block.initialize(philox_generator(12))
    field = _grid(5, 8, 13)
    params["loc.expand.weight"] = np.zeros((2, 8))

    out, _ = block.forward(params, field)

    np.testing.assert_array_equal(out, field)


def test_local_context_rejects_a_bad_table() -> None:
    """A neighbour table of the wrong width is refused."""
    block = LocalContext("loc", 8, 2)
    params = block.initialize(philox_generator(0))

    with pytest.raises(InvalidInputException):
        block.forward(params, _grid(5, 8), np.zeros((5, 2), dtype=int))
