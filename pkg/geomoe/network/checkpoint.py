"""Versioned binary checkpoints of GeoMoE parameters and optimizer state."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
import logging
import math
from pathlib import Path
import struct

import numpy as np

from ..const import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC
from ..exceptions import (
    CheckpointFormatException,
    ConfigMismatchException,
    InvalidConfigException,
    InvalidInputException,
)
from ..helpers import philox_generator
from ..models import AdamState, GeoMoEConfig
from ..nn import Parameters, validate_parameters
from .network import GeoMoENetwork

_LOGGER = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sI7IQIQQQI")
_NAME_LENGTH = struct.Struct("<H")
_NDIM = struct.Struct("<B")
_DIM = struct.Struct("<I")
_OFFSET = struct.Struct("<Q")

FIRST_MOMENT_PREFIX = "adam.m."
SECOND_MOMENT_PREFIX = "adam.v."

_INTEGER_FIELDS = (
    "layers",
    "channels",
    "sub_fields",
    "experts",
    "top_k",
    "loc_k",
    "attention_heads",
)
_FLAG_FIELDS = (
    "probability_injection",
    "spatial_path",
    "channel_path",
    "rectifier_moe",
)
_FLAG_OPTIMIZER = 1 << 16


@dataclass(eq=False)
class ModelCheckpoint:
    """Configuration, learned parameters and training metadata of a model."""

    config: GeoMoEConfig
    params: Parameters
    iterations: int = 0
    seed: int = 0
    optimizer: AdamState | None = None
    format_version: int = CHECKPOINT_FORMAT_VERSION
    network: GeoMoENetwork = field(init=False, repr=False)

    def __post_init__(self) -> None:
        """Build the block tree and check every declared array is present."""
        self.network = GeoMoENetwork(self.config)
        unknown = set(self.params) - set(self.network.parameter_shapes())
        if unknown:
            raise CheckpointFormatException(
                f"Undeclared parameter blocks: {', '.join(sorted(unknown))}"
            )
        try:
            validate_parameters(self.network, self.params)
        except InvalidInputException as err:
            raise CheckpointFormatException(str(err)) from err

    @classmethod
    def initialize(
        cls, config: GeoMoEConfig, seed: int | None = None
    ) -> ModelCheckpoint:
        """Return a freshly initialized model drawn from the configuration seed."""
        if seed is not None:
            config = replace(config, init_seed=seed)
        init_seed = config.init_seed
        network = GeoMoENetwork(config)
        params = network.initialize(philox_generator(init_seed))
        return cls(config=config, params=params, seed=init_seed)

    def copy(self) -> ModelCheckpoint:
        """Return a deep copy."""
        optimizer = None
        if self.optimizer is not None:
            optimizer = AdamState(
                step=self.optimizer.step,
                first_moments={
                    k: v.copy() for k, v in self.optimizer.first_moments.items()
                },
                second_moments={
                    k: v.copy() for k, v in self.optimizer.second_moments.items()
                },
            )
        return ModelCheckpoint(
            config=self.config,
            params={name: value.copy() for name, value in self.params.items()},
            iterations=self.iterations,
            seed=self.seed,
            optimizer=optimizer,
        )

    def check_config(self, config: GeoMoEConfig) -> None:
        """Raise when another configuration disagrees with this checkpoint."""
        differing = [
            f.name
            for f in fields(GeoMoEConfig)
            if f.name != "init_seed"
            and getattr(config, f.name) != getattr(self.config, f.name)
        ]
        if differing:
            raise ConfigMismatchException(
                f"Checkpoint and configuration disagree on {', '.join(differing)}"
            )


def _flags(checkpoint: ModelCheckpoint) -> int:
    flags = 0
    for bit, name in enumerate(_FLAG_FIELDS):
        if getattr(checkpoint.config, name):
            flags |= 1 << bit
    if checkpoint.optimizer is not None:
        flags |= _FLAG_OPTIMIZER
    return flags


def _blocks(checkpoint: ModelCheckpoint) -> list[tuple[str, np.ndarray]]:
    names = list(checkpoint.network.parameter_shapes())
    blocks = [(name, checkpoint.params[name]) for name in names]
    if checkpoint.optimizer is not None:
        blocks += [
            (FIRST_MOMENT_PREFIX + name, checkpoint.optimizer.first_moments[name])
            for name in names
        ]
        blocks += [
            (SECOND_MOMENT_PREFIX + name, checkpoint.optimizer.second_moments[name])
            for name in names
        ]
    return blocks


def checkpoint_to_bytes(checkpoint: ModelCheckpoint) -> bytes:
    """Serialize a checkpoint."""
    config = checkpoint.config
    blocks = _blocks(checkpoint)
    optimizer_step = checkpoint.optimizer.step if checkpoint.optimizer else 0
    parts = [
        _HEADER.pack(
            CHECKPOINT_MAGIC,
            CHECKPOINT_FORMAT_VERSION,
            *(getattr(config, name) for name in _INTEGER_FIELDS),
            config.init_seed,
            _flags(checkpoint),
            checkpoint.iterations,
            checkpoint.seed,
            optimizer_step,
            len(blocks),
        )
    ]

    offset = 0
    for name, value in blocks:
        encoded = name.encode("utf-8")
        parts.append(_NAME_LENGTH.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_NDIM.pack(value.ndim))
        parts.extend(_DIM.pack(dim) for dim in value.shape)
        parts.append(_OFFSET.pack(offset))
        offset += value.size * 8

    parts.extend(
        np.ascontiguousarray(value, dtype="<f8").tobytes() for _, value in blocks
    )
    return b"".join(parts)


class _Reader:
    """Cursor over a checkpoint buffer that fails on truncation."""

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.position = 0

    def unpack(self, layout: struct.Struct) -> tuple:
        end = self.position + layout.size
        if end > len(self.data):
            raise CheckpointFormatException("Checkpoint is truncated")
        values = layout.unpack_from(self.data, self.position)
        self.position = end
        return values

    def take(self, size: int) -> bytes:
        end = self.position + size
        if end > len(self.data):
            raise CheckpointFormatException("Checkpoint is truncated")
        chunk = self.data[self.position : end]
        self.position = end
        return chunk


def checkpoint_from_bytes(data: bytes) -> ModelCheckpoint:
    """Deserialize a checkpoint."""
    reader = _Reader(data)
    header = reader.unpack(_HEADER)
    magic, version = header[0], header[1]
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatException(f"Not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointFormatException(f"Unsupported checkpoint version {version}")

    integers = header[2 : 2 + len(_INTEGER_FIELDS)]
    init_seed, flags, iterations, seed, optimizer_step, count = header[
        2 + len(_INTEGER_FIELDS) :
    ]
    try:
        config = GeoMoEConfig(
            **dict(zip(_INTEGER_FIELDS, integers)),
            **{name: bool(flags & (1 << bit)) for bit, name in enumerate(_FLAG_FIELDS)},
            init_seed=init_seed,
        )
    except InvalidConfigException as err:
        raise CheckpointFormatException(f"Invalid stored configuration: {err}") from err

    manifest = []
    expected_offset = 0
    for _ in range(count):
        (length,) = reader.unpack(_NAME_LENGTH)
        name = reader.take(length).decode("utf-8")
        (ndim,) = reader.unpack(_NDIM)
        shape = tuple(reader.unpack(_DIM)[0] for _ in range(ndim))
        (offset,) = reader.unpack(_OFFSET)
        if offset != expected_offset:
            raise CheckpointFormatException(f"Block {name} has a bad offset {offset}")
        expected_offset += math.prod(shape) * 8
        manifest.append((name, shape))

    payload = reader.take(expected_offset)
    if reader.position != len(data):
        raise CheckpointFormatException("Trailing bytes after the checkpoint data")

    arrays = {}
    start = 0
    for name, shape in manifest:
        size = math.prod(shape)
        arrays[name] = (
            np.frombuffer(payload, dtype="<f8", count=size, offset=start * 8)
            .astype(np.float64)
            .reshape(shape)
        )
        start += size

    params = {
        name: value
        for name, value in arrays.items()
        if not name.startswith((FIRST_MOMENT_PREFIX, SECOND_MOMENT_PREFIX))
    }
    optimizer = None
    if flags & _FLAG_OPTIMIZER:
        try:
            optimizer = AdamState(
                step=optimizer_step,
                first_moments={
                    name: arrays[FIRST_MOMENT_PREFIX + name] for name in params
                },
                second_moments={
                    name: arrays[SECOND_MOMENT_PREFIX + name] for name in params
                },
            )
        except KeyError as err:
            raise CheckpointFormatException(f"Missing optimizer block {err}") from err

    return ModelCheckpoint(
        config=config,
        params=params,
        iterations=iterations,
        seed=seed,
        optimizer=optimizer,
        format_version=version,
    )


def save_checkpoint(checkpoint: ModelCheckpoint, path: str | Path) -> None:
    """Write a checkpoint file."""
    Path(path).write_bytes(checkpoint_to_bytes(checkpoint))
    _LOGGER.debug("Wrote checkpoint %s (%d iterations)", path, checkpoint.iterations)


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    """Read a checkpoint file."""
    try:
        data = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointFormatException(f"Cannot read {path}: {err}") from err
    return checkpoint_from_bytes(data)
