"""Deterministic desk-scale training loop."""
from __future__ import annotations

from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import dataclass, field
import logging
import os
from pathlib import Path

import numpy as np

from ..exceptions import InvalidInputException, NumericalFailureException
from ..helpers import philox_generator
from ..models import (
    GeneratedPair,
    GeoMoEConfig,
    LossWeights,
    OptimizerConfig,
    TrainBatch,
    TrainSample,
)
from ..network import (
    ROUTE_DECOMPOSITION,
    ROUTE_RECTIFIER,
    GeoMoENetwork,
    ModelCheckpoint,
    RouteKey,
)
from ..nn import GradientBundle, Parameters
from .losses import TotalLoss, total_loss
from .optimizer import adam_state, adam_step

_LOGGER = logging.getLogger(__name__)

METRICS_FIELDS = ("iteration", "L_cls", "L_reg", "L_load", "total")


@dataclass(frozen=True)
class TrainingRecord:
    """Batch-mean loss components and routing mass of one iteration."""

    iteration: int
    classification: float
    regression: float
    load: float
    total: float
    learning_rate: float
    expert_mass: dict[RouteKey, tuple[float, ...]] = field(default_factory=dict)
    flags: int = 0

    def row(self) -> list[str]:
        """Return the metrics-log row of the record."""
        values = [
            str(self.iteration),
            repr(self.classification),
            repr(self.regression),
            repr(self.load),
            repr(self.total),
        ]
        for key in sorted(self.expert_mass):
            values.extend(repr(mass) for mass in self.expert_mass[key])
        return values


@dataclass
class TrainingResult:
    """Final checkpoint of a run and the records of the iterations it ran."""

    checkpoint: ModelCheckpoint
    records: list[TrainingRecord] = field(default_factory=list)


def metrics_header(network: GeoMoENetwork) -> list[str]:
    """Return the metrics-log columns for a network."""
    columns = list(METRICS_FIELDS)
    for index, layer in enumerate(network.layers):
        for kind, moe in (
            (ROUTE_DECOMPOSITION, layer.decomposition.moe),
            (ROUTE_RECTIFIER, layer.rectifier.moe),
        ):
            columns.extend(
                f"mass_l{index}_{kind}_e{e}" for e in range(moe.num_experts)
            )
    return columns


class MetricsLog:
    """Append-only comma-separated log with one row per iteration."""

    def __init__(self, path: str | Path, header: Sequence[str]) -> None:
        """Open the log, writing the header when the file is new."""
        self.path = Path(path)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._file = self.path.open("a", newline="", encoding="utf-8")
        self._writer = csv.writer(self._file)
        if new:
            self._writer.writerow(header)

    def append(self, record: TrainingRecord) -> None:
        """Write one record."""
        self._writer.writerow(record.row())
        self._file.flush()

    def close(self) -> None:
        """Close the file."""
        self._file.close()


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    """Read a metrics log back into rows of floats."""
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return [
            {key: float(value) for key, value in row.items()}
            for row in csv.DictReader(handle)
        ]


def build_batch(pairs: Sequence[GeneratedPair | TrainSample]) -> TrainBatch:
    """Turn pairs into training samples, leaving out those with too few inliers."""
    samples = []
    for pair in pairs:
        if isinstance(pair, TrainSample):
            samples.append(pair)
            continue
        try:
            samples.append(TrainSample.from_pair(pair))
        except InvalidInputException as err:
            _LOGGER.warning("Skipping pair %s: %s", pair.pair_id, err)
    if not samples:
        raise InvalidInputException("No usable training pair in the dataset")
    return samples


def sample_order(seed: int, count: int, position: int) -> int:
    """Return the dataset index drawn at a global sample position."""
    epoch, offset = divmod(position, count)
    permutation = philox_generator(seed, epoch).permutation(count)
    return int(permutation[offset])


@dataclass
class _PairStep:
    loss: TotalLoss
    grads: GradientBundle
    expert_mass: dict[RouteKey, np.ndarray]


class Trainer:
    """Owns the parameters and optimizer moments of one training run."""

    def __init__(
        self,
        samples: TrainBatch,
        config: GeoMoEConfig,
        optimizer: OptimizerConfig,
        seed: int,
        *,
        loss_weights: LossWeights | None = None,
        checkpoint: ModelCheckpoint | None = None,
        threads: int | None = None,
    ) -> None:
        """Start from a fresh initialization or resume from a checkpoint."""
        if checkpoint is None:
            checkpoint = ModelCheckpoint.initialize(config)
        else:
            checkpoint.check_config(config)
            checkpoint = checkpoint.copy()
            if checkpoint.seed != seed:
                _LOGGER.warning(
                    "Resuming a run seeded %s with seed %s", checkpoint.seed, seed
                )
        checkpoint.seed = seed
        if checkpoint.optimizer is None:
            checkpoint.optimizer = adam_state(checkpoint.params)

        self.samples = samples
        self.optimizer = optimizer
        self.loss_weights = optimizer.effective_loss_weights(
            loss_weights or LossWeights()
        )
        self.seed = seed
        self.checkpoint = checkpoint
        self.network = checkpoint.network
        self.threads = threads or os.cpu_count() or 1

    def batch_indices(self, iteration: int) -> list[int]:
        """Return the dataset indices of one iteration's batch."""
        size = self.optimizer.batch_size
        return [
            sample_order(self.seed, len(self.samples), iteration * size + slot)
            for slot in range(size)
        ]

    def _pair_step(
        self, params: Parameters, sample: TrainSample, iteration: int
    ) -> _PairStep:
        result = self.network.forward(
            params, sample.correspondences.motion_array()
        )
        diagnostics = result.diagnostics
        loss = total_loss(
            result.layer_weights,
            diagnostics.balance_probs,
            sample,
            self.loss_weights,
            iteration,
        )
        grads = self.network.backward(
            params, result, loss.grad_layer_weights, loss.grad_probs
        )
        return _PairStep(loss, grads, diagnostics.expert_mass)

    def step(self, executor: ThreadPoolExecutor | None = None) -> TrainingRecord:
        """Run one iteration and advance the checkpoint."""
        checkpoint = self.checkpoint
        iteration = checkpoint.iterations
        params = checkpoint.params
        batch = [self.samples[i] for i in self.batch_indices(iteration)]

        def run(sample: TrainSample) -> _PairStep:
            return self._pair_step(params, sample, iteration)

        steps = list(executor.map(run, batch)) if executor else list(map(run, batch))

        grads = GradientBundle()
        for pair_step in steps:
            grads.merge(pair_step.grads)
        grads = grads.scaled(1.0 / len(steps))

        count = len(steps)
        expert_mass = {
            key: tuple(
                float(v) for v in sum(s.expert_mass[key] for s in steps) / count
            )
            for key in steps[0].expert_mass
        }
        record = TrainingRecord(
            iteration=iteration,
            classification=sum(s.loss.classification for s in steps) / count,
            regression=sum(s.loss.regression for s in steps) / count,
            load=sum(s.loss.load for s in steps) / count,
            total=sum(s.loss.value for s in steps) / count,
            learning_rate=self.optimizer.learning_rate_at(iteration),
            expert_mass=expert_mass,
            flags=sum(len(s.loss.flags) for s in steps),
        )

        finite = np.isfinite(record.total) and all(
            np.isfinite(value).all() for value in grads.values()
        )
        if not finite:
            raise NumericalFailureException(
                f"Non-finite loss or gradient at iteration {iteration}",
                checkpoint=checkpoint.copy(),
                iteration=iteration,
            )
        if record.flags:
            _LOGGER.warning(
                "Iteration %d: %d flagged loss terms", iteration, record.flags
            )

        updated, moments = adam_step(
            params, grads, checkpoint.optimizer, self.optimizer, record.learning_rate
        )
        if not all(np.isfinite(value).all() for value in updated.values()):
            raise NumericalFailureException(
                f"Non-finite parameters after iteration {iteration}",
                checkpoint=checkpoint.copy(),
                iteration=iteration,
            )
        checkpoint.params = updated
        checkpoint.optimizer = moments
        checkpoint.iterations = iteration + 1
        return record

    def run(
        self,
        metrics: MetricsLog | None = None,
        on_record: Callable[[TrainingRecord], None] | None = None,
    ) -> TrainingResult:
        """Iterate until the configured number of iterations is reached."""
        result = TrainingResult(self.checkpoint)
        total = self.optimizer.iterations
        if self.checkpoint.iterations >= total:
            _LOGGER.info("Checkpoint already at %d iterations", total)
            return result

        with ThreadPoolExecutor(max_workers=self.threads) as executor:
            while self.checkpoint.iterations < total:
                record = self.step(executor if self.threads > 1 else None)
                result.records.append(record)
                if metrics is not None:
                    metrics.append(record)
                if on_record is not None:
                    on_record(record)
                if (record.iteration + 1) % self.optimizer.log_interval == 0:
                    _LOGGER.info(
                        "Iteration %d/%d: cls %.4f reg %.4g load %.4f total %.4f",
                        record.iteration + 1,
                        total,
                        record.classification,
                        record.regression,
                        record.load,
                        record.total,
                    )
        result.checkpoint = self.checkpoint
        return result


def train_loop(
    dataset: Sequence[GeneratedPair | TrainSample],
    config: GeoMoEConfig,
    optimizer: OptimizerConfig,
    seed: int,
    *,
    loss_weights: LossWeights | None = None,
    checkpoint: ModelCheckpoint | None = None,
    metrics_path: str | Path | None = None,
    threads: int | None = None,
) -> TrainingResult:
    """Train a model on a dataset; ``checkpoint`` resumes an earlier run."""
    if not dataset:
        raise InvalidInputException("Training needs a non-empty dataset")
    trainer = Trainer(
        build_batch(dataset),
        config,
        optimizer,
        seed,
        loss_weights=loss_weights,
        checkpoint=checkpoint,
        threads=threads,
    )
    metrics = None
    if metrics_path is not None:
        metrics = MetricsLog(metrics_path, metrics_header(trainer.network))
    try:
        return trainer.run(metrics)
    finally:
        if metrics is not None:
            metrics.close()
