"""Run configuration: YAML documents validated against the defaults table."""
from __future__ import annotations

from collections.abc import Iterable, Mapping
import copy
from dataclasses import dataclass, replace
import logging
from pathlib import Path
from typing import Any

import voluptuous as vol
import yaml

from .const import (
    ALL_ARMS,
    AUC_METHODS,
    CONF_AUC,
    CONF_DATASET,
    CONF_EVALUATION,
    CONF_LOSS,
    CONF_MODEL,
    CONF_RANSAC,
    CONF_RUN,
    CONF_SCENE,
    CONF_TRAINING,
    CONFIG_DEFAULTS,
)
from .exceptions import InvalidConfigException
from .models import (
    AucSpec,
    EvaluationConfig,
    GeoMoEConfig,
    LossWeights,
    OptimizerConfig,
    RansacConfig,
    SceneSpec,
)

_LOGGER = logging.getLogger(__name__)

SIDECAR_SUFFIX = ".config.yaml"

Document = dict[str, dict[str, Any]]


def _integer(value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise vol.Invalid("expected an integer")
    return value


def _number(value: Any) -> float:
    # YAML 1.1 reads 1e-3 (no dot) as a string
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError as err:
            raise vol.Invalid("expected a number") from err
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise vol.Invalid("expected a number")
    return float(value)


def _boolean(value: Any) -> bool:
    if not isinstance(value, bool):
        raise vol.Invalid("expected true or false")
    return value


_POSITIVE = vol.All(_number, vol.Range(min=0, min_included=False))

_SPECIAL_VALIDATORS: dict[tuple[str, str], Any] = {
    (CONF_AUC, "method"): vol.In(AUC_METHODS),
    (CONF_EVALUATION, "arms"): vol.All([vol.In(ALL_ARMS)], vol.Length(min=1)),
    (CONF_DATASET, "pairs"): vol.All(_integer, vol.Range(min=1)),
    (CONF_RANSAC, "essential_threshold"): _POSITIVE,
    (CONF_RANSAC, "homography_threshold"): _POSITIVE,
    (CONF_RUN, "threads"): vol.All(_integer, vol.Range(min=0)),
}


def _validator(section: str, key: str, default: Any) -> Any:
    special = _SPECIAL_VALIDATORS.get((section, key))
    if special is not None:
        return special
    if isinstance(default, bool):
        return _boolean
    if isinstance(default, int):
        return _integer
    if isinstance(default, float):
        return _number
    if isinstance(default, tuple):
        return [_number]
    return str


CONFIG_SCHEMA = vol.Schema(
    {
        vol.Required(section): vol.Schema(
            {
                vol.Required(key): _validator(section, key, default)
                for key, default in keys.items()
            },
            extra=vol.PREVENT_EXTRA,
        )
        for section, keys in CONFIG_DEFAULTS.items()
    },
    extra=vol.PREVENT_EXTRA,
)


def default_document() -> Document:
    """Return the defaults table as a YAML-ready document."""
    return {
        section: {
            key: list(value) if isinstance(value, tuple) else value
            for key, value in keys.items()
        }
        for section, keys in CONFIG_DEFAULTS.items()
    }


def load_document(path: str | Path) -> dict[str, Any]:
    """Read a YAML config file; an empty file is an empty document."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise InvalidConfigException(str(path), f"cannot read: {err}") from err
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise InvalidConfigException(str(path), f"invalid YAML: {err}") from err
    if document is None:
        return {}
    if not isinstance(document, dict):
        raise InvalidConfigException(str(path), "must hold a mapping of sections")
    return document


def parse_override(text: str) -> tuple[str, str, Any]:
    """Parse ``section.key=value``; the value is read as YAML."""
    path, separator, raw = text.partition("=")
    section, dot, key = path.strip().partition(".")
    if not separator or not dot or not section or not key or "." in key:
        raise InvalidConfigException(
            path.strip() or text, "overrides take the form section.key=value"
        )
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as err:
        raise InvalidConfigException(path, f"unreadable value {raw!r}") from err
    return section, key, value


def merge_document(
    document: Mapping[str, Any], overrides: Iterable[tuple[str, str, Any]] = ()
) -> dict[str, Any]:
    """Lay a user document and overrides over the defaults."""
    merged: dict[str, Any] = default_document()
    for section, values in document.items():
        if isinstance(values, Mapping) and isinstance(merged.get(section), dict):
            merged[section].update(values)
        else:
            merged[section] = copy.deepcopy(values)
    for section, key, value in overrides:
        target = merged.setdefault(section, {})
        if not isinstance(target, dict):
            raise InvalidConfigException(section, "must be a mapping")
        target[key] = value
    return merged


def validate_document(document: Mapping[str, Any]) -> Document:
    """Validate a merged document, naming the offending key on failure."""
    try:
        return CONFIG_SCHEMA(dict(document))
    except vol.Invalid as err:
        key = ".".join(str(part) for part in err.path) or "<root>"
        raise InvalidConfigException(key, err.msg) from err


@dataclass(frozen=True)
class RunConfig:
    """Typed view of a validated run configuration."""

    model: GeoMoEConfig
    scene: SceneSpec
    pairs: int
    loss: LossWeights
    optimizer: OptimizerConfig
    training_seed: int
    essential_ransac: RansacConfig
    homography_ransac: RansacConfig
    auc: AucSpec
    evaluation: EvaluationConfig
    arms: tuple[str, ...]
    threads: int | None
    document: Document
    explicit: frozenset[str] = frozenset()

    @classmethod
    def from_document(
        cls, document: Mapping[str, Any], explicit: Iterable[str] = ()
    ) -> RunConfig:
        """Validate a merged document and build the typed sections."""
        doc = validate_document(document)
        training = dict(doc[CONF_TRAINING])
        training_seed = training.pop("seed")
        ransac = doc[CONF_RANSAC]
        evaluation = dict(doc[CONF_EVALUATION])
        arms = tuple(dict.fromkeys(evaluation.pop("arms")))
        return cls(
            model=GeoMoEConfig(**doc[CONF_MODEL]),
            scene=SceneSpec(**doc[CONF_SCENE]),
            pairs=doc[CONF_DATASET]["pairs"],
            loss=LossWeights(**doc[CONF_LOSS]),
            optimizer=OptimizerConfig(**training),
            training_seed=training_seed,
            essential_ransac=RansacConfig(
                max_iterations=ransac["max_iterations"],
                inlier_threshold=ransac["essential_threshold"],
                confidence=ransac["confidence"],
                seed=ransac["seed"],
            ),
            homography_ransac=RansacConfig(
                max_iterations=ransac["max_iterations"],
                inlier_threshold=ransac["homography_threshold"],
                confidence=ransac["confidence"],
                seed=ransac["seed"],
            ),
            auc=AucSpec(**doc[CONF_AUC]),
            evaluation=EvaluationConfig(**evaluation),
            arms=arms,
            threads=doc[CONF_RUN]["threads"] or None,
            document=doc,
            explicit=frozenset(explicit),
        )

    def to_yaml(self) -> str:
        """Return the effective configuration as YAML."""
        return yaml.safe_dump(self.document, sort_keys=False)

    def sets_section(self, section: str) -> bool:
        """Return True when the user gave any key of a section."""
        return any(key.startswith(f"{section}.") for key in self.explicit)

    def with_model(self, model: GeoMoEConfig) -> RunConfig:
        """Return the configuration with another model section."""
        document = copy.deepcopy(self.document)
        document[CONF_MODEL] = {
            key: getattr(model, key) for key in CONFIG_DEFAULTS[CONF_MODEL]
        }
        return replace(self, model=model, document=document)


def load_run_config(
    path: str | Path | None = None,
    overrides: Iterable[str] = (),
    flags: Iterable[tuple[str, str, Any]] = (),
) -> RunConfig:
    """Read a config file (or none), then apply ``--set`` overrides and flags.

    Flags are already-parsed ``(section, key, value)`` triples and win over
    both the file and the ``--set`` overrides.
    """
    document = load_document(path) if path is not None else {}
    parsed = [parse_override(text) for text in overrides] + list(flags)
    explicit = {
        f"{section}.{key}"
        for section, values in document.items()
        if isinstance(values, Mapping)
        for key in values
    }
    explicit.update(f"{section}.{key}" for section, key, _ in parsed)
    config = RunConfig.from_document(merge_document(document, parsed), explicit)
    _LOGGER.debug("Effective configuration:\n%s", config.to_yaml())
    return config


def sidecar_path(artifact: str | Path) -> Path:
    """Return where the config echo of a binary artifact is written."""
    return Path(f"{artifact}{SIDECAR_SUFFIX}")


def write_sidecar(artifact: str | Path, config: RunConfig) -> Path:
    """Write the effective configuration next to an artifact."""
    path = sidecar_path(artifact)
    path.write_text(config.to_yaml(), encoding="utf-8")
    return path


def _format_default(value: Any) -> str:
    if isinstance(value, tuple):
        value = list(value)
    return yaml.safe_dump(value, default_flow_style=True).strip().removesuffix(
        "\n..."
    )


def help_epilog() -> str:
    """Return the list of every config key with its default."""
    lines = ["configuration keys (section.key = default):"]
    for section, keys in CONFIG_DEFAULTS.items():
        for key, default in keys.items():
            lines.append(f"  {section}.{key} = {_format_default(default)}")
    return "\n".join(lines)
