"""Tests for the training objective, optimizer and loop."""
from __future__ import annotations

from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from geomoe.exceptions import InvalidInputException, NumericalFailureException
from geomoe.geometry import skew, weighted_eight_point
from geomoe.helpers import philox_generator
from geomoe.models import LossWeights, OptimizerConfig, SceneSpec, TrainSample
from geomoe.network import ROUTE_DECOMPOSITION, GeoMoENetwork
from geomoe.nn import GradientBundle, finite_difference_check
from geomoe.synthetic import generate_pairs
from geomoe.training import (
    adam_state,
    adam_step,
    build_batch,
    classification_term,
    essential_regression_loss,
    load_balance_loss,
    load_balance_term,
    read_metrics,
    regression_term,
    total_loss,
    train_loop,
)
from geomoe.training.losses import (
    FLAG_NO_INLIERS,
    FLAG_NO_OUTLIERS,
    FLAG_RANK_DEFICIENT,
    clamped_epipolar_loss,
)
from geomoe.training.trainer import METRICS_FIELDS, sample_order

TEST_TRAIN_SPEC = SceneSpec(points_per_pair=48, outlier_ratio=0.3, seed=31)
TEST_OPTIMIZER = OptimizerConfig(
    iterations=4, batch_size=2, learning_rate=1e-3, rescale_schedule=False
)
TEST_SIDEWAYS_E = skew([1.0, 0.0, 0.0])
TEST_SEEDS = range(20)
TEST_COMPOSED_TOLERANCE = 1e-4
TEST_BALANCE_MATRICES = 1000


@pytest.fixture(name="train_pairs")
def train_pairs_fixture():
    """Three small labeled pairs."""
    return generate_pairs(TEST_TRAIN_SPEC, 3, threads=1)


def _soft_weights(labels: np.ndarray) -> np.ndarray:
    return np.where(labels, 0.9, 0.1)


def test_classification_term_values() -> None:
    """Both classes weigh equally whatever their sizes."""
    term = classification_term([0.9, 0.2, 0.4], [True, False, False])

    expected = (-np.log(0.9) - (np.log(0.8) + np.log(0.6)) / 2) / 2
    assert term.value == pytest.approx(expected)
    np.testing.assert_allclose(
        term.gradient, [-1 / (2 * 0.9), 1 / (4 * 0.8), 1 / (4 * 0.6)]
    )
    assert term.flags == ()


def test_classification_term_with_one_class() -> None:
    """A missing class is flagged and the other class carries the loss."""
    term = classification_term([0.5, 0.25], [True, True])

    assert term.value == pytest.approx(-(np.log(0.5) + np.log(0.25)) / 2)
    assert term.flags == (FLAG_NO_OUTLIERS,)
    assert not term.skipped


def test_classification_term_clamps_the_logarithm() -> None:
    """A confident wrong prediction stays finite and stops pulling."""
    term = classification_term([0.0, 1.0], [True, False])

    assert np.isfinite(term.value)
    assert term.value == pytest.approx(-np.log(1e-12))
    np.testing.assert_array_equal(term.gradient, 0.0)


def test_classification_term_rejects_length_mismatch() -> None:
    """One label per prediction."""
    with pytest.raises(InvalidInputException):
        classification_term([0.5, 0.5], [True])


def test_epipolar_loss_clamps_far_points() -> None:
    """A residual of 200 is clamped to 0.25 and contributes no gradient."""
    value, gradient = clamped_epipolar_loss(
        TEST_SIDEWAYS_E.reshape(9), np.array([[0.0, 0.0]]), np.array([[0.0, 10.0]])
    )

    assert value == pytest.approx(0.25)
    np.testing.assert_array_equal(gradient, 0.0)


def test_epipolar_loss_gradient() -> None:
    """The gradient in E's entries matches central differences."""
    rng = philox_generator(3)
    x = rng.uniform(-0.5, 0.5, (6, 2))
    x_prime = x + np.array([0.0, 0.05]) + rng.normal(0, 0.02, (6, 2))

    def op(arrays):
        value, gradient = clamped_epipolar_loss(arrays["e"], x, x_prime)
        return np.array([value]), lambda grad: {"e": grad[0] * gradient}

    report = finite_difference_check(
        op, {"e": TEST_SIDEWAYS_E.reshape(9)}, tolerance=1e-4
    )

    assert report.passed, report.max_relative_error


@pytest.mark.parametrize("seed", TEST_SEEDS)
def test_regression_term_gradient(noisy_pair, seed: int) -> None:
    """Weight cotangents through the projected estimate match central differences."""
    corrs = noisy_pair.correspondences
    labels = noisy_pair.labels
    jitter = philox_generator(seed).uniform(-0.05, 0.05, len(labels))

    def op(arrays):
        term = regression_term(arrays["weights"], corrs.x, corrs.x_prime, labels)
        return np.array([term.value]), lambda grad: {"weights": grad[0] * term.gradient}

    report = finite_difference_check(
        op,
        {"weights": _soft_weights(labels) + jitter},
        step=1e-6,
        tolerance=TEST_COMPOSED_TOLERANCE,
    )

    assert report.passed, report.max_relative_error


def test_regression_term_scores_the_eight_point_estimate(noisy_pair) -> None:
    """The loss is the clamped residual of the rank-2 matrix the solver returns."""
    corrs = noisy_pair.correspondences
    labels = noisy_pair.labels
    weights = _soft_weights(labels)
    term = regression_term(weights, corrs.x, corrs.x_prime, labels)

    essential = weighted_eight_point(corrs, weights)
    expected, _ = clamped_epipolar_loss(
        essential.e.reshape(9), corrs.x[labels], corrs.x_prime[labels]
    )

    assert term.flags == ()
    assert term.value == pytest.approx(expected, rel=1e-9)
    wrapped = essential_regression_loss(weights, corrs, noisy_pair.gt_essential)
    assert wrapped == pytest.approx(expected, rel=1e-9)


def test_label_weights_beat_uniform_weights(noisy_pair) -> None:
    """Label weights beat uniform weights on a set with outliers."""
    corrs = noisy_pair.correspondences
    labels = noisy_pair.labels
    good = regression_term(labels.astype(float), corrs.x, corrs.x_prime, labels)
    flat = regression_term(np.ones(len(corrs)), corrs.x, corrs.x_prime, labels)

    assert good.value < flat.value


def test_regression_term_skips_degenerate_weights(noisy_pair) -> None:
    """Too few weighted points or no inliers contribute nothing."""
    corrs = noisy_pair.correspondences
    weights = np.zeros(len(corrs))
    weights[:5] = 1.0

    term = regression_term(weights, corrs.x, corrs.x_prime, noisy_pair.labels)
    assert term.value == 0.0
    assert term.flags == (FLAG_RANK_DEFICIENT,)
    assert term.skipped

    term = regression_term(
        np.ones(len(corrs)), corrs.x, corrs.x_prime, np.zeros(len(corrs), bool)
    )
    assert term.flags == (FLAG_NO_INLIERS,)


def test_load_balance_bounds() -> None:
    """Uniform routing gives 1/T^2, collapsed routing gives 1/T."""
    uniform = np.full((6, 4), 0.25)
    collapsed = np.zeros((6, 4))
    collapsed[:, 2] = 1.0

    assert load_balance_loss([uniform]) == pytest.approx(1 / 16, abs=1e-12)
    assert load_balance_loss([collapsed]) == pytest.approx(1 / 4)
    assert load_balance_loss([]) == 0.0

    rng = philox_generator(4)
    for _ in range(TEST_BALANCE_MATRICES):
        experts = int(rng.integers(2, 9))
        probs = rng.dirichlet(np.ones(experts), size=int(rng.integers(1, 12)))
        value = load_balance_loss([probs])
        assert 1 / experts**2 - 1e-12 <= value <= 1 / experts + 1e-12


def test_load_balance_gradient() -> None:
    """The penalty's gradient over several mixtures matches central differences."""
    rng = philox_generator(5)
    inputs = {
        "first": rng.dirichlet(np.ones(4), size=3),
        "second": rng.dirichlet(np.ones(4), size=5),
    }

    def op(arrays):
        value, gradients = load_balance_term([arrays["first"], arrays["second"]])
        return np.array([value]), lambda grad: {
            "first": grad[0] * gradients[0],
            "second": grad[0] * gradients[1],
        }

    assert finite_difference_check(op, inputs).passed


def test_total_loss_combines_the_terms(noisy_pair) -> None:
    """Value is classification + mu regression + beta/L balance."""
    sample = TrainSample.from_pair(noisy_pair)
    layer_weights = [_soft_weights(sample.labels)] * 2
    probs = {(0, ROUTE_DECOMPOSITION): np.full((4, 4), 0.25)}
    weights = LossWeights(mu_initial=0.5, mu_target=0.5, beta=0.01)

    loss = total_loss(layer_weights, probs, sample, weights, iteration=0)

    assert loss.mu == 0.5
    assert loss.load == pytest.approx(1 / 16)
    assert loss.value == pytest.approx(
        loss.classification + 0.5 * loss.regression + 0.005 / 16
    )
    assert len(loss.grad_layer_weights) == 2
    np.testing.assert_allclose(
        loss.grad_probs[(0, ROUTE_DECOMPOSITION)], 0.005 * 2 * 0.25 / 16
    )


def test_mu_schedule() -> None:
    """The regression weight switches on at the ramp iteration."""
    weights = LossWeights(mu_initial=0.0, mu_target=0.5, mu_ramp_iteration=10)

    assert weights.mu(9) == 0.0
    assert weights.mu(10) == 0.5


def test_learning_rate_schedule() -> None:
    """Constant until the decay start, then exponential to the final ratio."""
    config = OptimizerConfig(
        iterations=100,
        learning_rate=1.0,
        lr_decay_start=50,
        lr_final_ratio=0.1,
        rescale_schedule=False,
    )

    assert config.learning_rate_at(49) == 1.0
    assert config.learning_rate_at(75) == pytest.approx(0.1**0.5)
    assert config.learning_rate_at(100) == pytest.approx(0.1)


def test_rescaled_schedule() -> None:
    """Short runs move the mu ramp and the decay onset with the run length."""
    config = OptimizerConfig(iterations=1000)

    assert config.effective_decay_start == 160
    assert config.effective_loss_weights(LossWeights()).mu_ramp_iteration == 200
    assert OptimizerConfig(iterations=100000).effective_decay_start == 80000


def test_adam_step() -> None:
    """The first step moves by the learning rate; missing gradients count as zero."""
    params = {"w": np.array([1.0, -1.0]), "b": np.array([0.5])}
    grads = {"w": np.array([0.5, -2.0])}

    updated, state = adam_step(
        params, grads, adam_state(params), OptimizerConfig(), learning_rate=0.1
    )

    np.testing.assert_allclose(updated["w"], [0.9, -0.9], atol=1e-6)
    np.testing.assert_array_equal(updated["b"], [0.5])
    np.testing.assert_array_equal(params["w"], [1.0, -1.0])
    assert state.step == 1

    with pytest.raises(InvalidInputException):
        adam_step({"other": np.zeros(1)}, {}, state, OptimizerConfig(), 0.1)


def test_sample_order_covers_every_pair_each_epoch() -> None:
    """Each epoch is a permutation of the dataset."""
    first = [sample_order(3, 5, position) for position in range(5)]
    second = [sample_order(3, 5, position) for position in range(5, 10)]

    assert sorted(first) == sorted(second) == list(range(5))


def test_build_batch_skips_pairs_without_inliers(train_pairs) -> None:
    """Pairs with fewer than eight labeled inliers are left out."""
    spec = SceneSpec(points_per_pair=16, outlier_ratio=0.95, seed=2)
    hopeless = generate_pairs(spec, 1, threads=1)

    assert len(build_batch([*train_pairs, *hopeless])) == 3
    with pytest.raises(InvalidInputException):
        build_batch(hopeless)


def test_train_loop_writes_metrics(tmp_path: Path, train_pairs, tiny_config) -> None:
    """A short run logs one row per iteration under the fixed header."""
    metrics = tmp_path / "metrics.csv"
    result = train_loop(
        train_pairs, tiny_config, TEST_OPTIMIZER, 5, metrics_path=metrics, threads=1
    )

    assert result.checkpoint.iterations == 4
    assert result.checkpoint.optimizer.step == 4
    rows = read_metrics(metrics)
    header = metrics.read_text(encoding="utf-8").splitlines()[0].split(",")
    assert tuple(header[:5]) == METRICS_FIELDS
    assert len(header) == 5 + 2 * (4 + 4)
    assert [row["iteration"] for row in rows] == [0, 1, 2, 3]
    for row, record in zip(rows, result.records):
        assert row["total"] == record.total
        assert np.isfinite(row["total"])


def test_train_loop_is_deterministic(train_pairs, tiny_config) -> None:
    """The same seed gives the same parameters whatever the thread count."""
    first = train_loop(train_pairs, tiny_config, TEST_OPTIMIZER, 5, threads=1)
    second = train_loop(train_pairs, tiny_config, TEST_OPTIMIZER, 5, threads=2)

    for name, value in first.checkpoint.params.items():
        np.testing.assert_array_equal(value, second.checkpoint.params[name])


def test_resume_matches_an_uninterrupted_run(train_pairs, tiny_config) -> None:
    """Stopping after two iterations and resuming changes nothing."""
    full = train_loop(train_pairs, tiny_config, TEST_OPTIMIZER, 5, threads=1)
    half = OptimizerConfig(
        iterations=2, batch_size=2, learning_rate=1e-3, rescale_schedule=False
    )
    partial = train_loop(train_pairs, tiny_config, half, 5, threads=1)
    resumed = train_loop(
        train_pairs,
        tiny_config,
        TEST_OPTIMIZER,
        5,
        checkpoint=partial.checkpoint,
        threads=1,
    )

    assert [r.iteration for r in resumed.records] == [2, 3]
    assert resumed.checkpoint.iterations == 4
    for name, value in full.checkpoint.params.items():
        np.testing.assert_array_equal(value, resumed.checkpoint.params[name])
    assert partial.checkpoint.iterations == 2


def test_non_finite_gradients_stop_training(train_pairs, tiny_config) -> None:
    """The last good checkpoint travels with the error."""

    def poisoned(self, params, result, *args):
        return GradientBundle(
            {name: np.full_like(value, np.nan) for name, value in params.items()}
        )

    with patch.object(GeoMoENetwork, "backward", poisoned):
        with pytest.raises(NumericalFailureException) as err:
            train_loop(train_pairs, tiny_config, TEST_OPTIMIZER, 5, threads=1)

    assert err.value.checkpoint.iterations == 0
    assert err.value.details["iteration"] == 0


def test_train_loop_rejects_an_empty_dataset(tiny_config) -> None:
    """There is nothing to learn from."""
    with pytest.raises(InvalidInputException):
        train_loop([], tiny_config, TEST_OPTIMIZER, 0)
