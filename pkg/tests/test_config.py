"""Tests for the run configuration layer."""
from __future__ import annotations

from pathlib import Path

import pytest

from geomoe.config import (
    help_epilog,
    load_run_config,
    parse_override,
    sidecar_path,
    write_sidecar,
)
from geomoe.const import ARM_RANSAC, ARM_RAW
from geomoe.exceptions import InvalidConfigException
from geomoe.models import (
    AucSpec,
    GeoMoEConfig,
    OptimizerConfig,
    RansacConfig,
    SceneSpec,
)

TEST_CONFIG = """\
model:
  layers: 2
  channels: 16
scene:
  points_per_pair: 32
"""


@pytest.fixture(name="config_file")
def config_file_fixture(tmp_path: Path) -> Path:
    """A partial YAML configuration."""
    path = tmp_path / "run.yaml"
    path.write_text(TEST_CONFIG, encoding="utf-8")
    return path


def test_defaults() -> None:
    """Without a file or overrides every section holds its defaults."""
    run = load_run_config()

    assert run.model == GeoMoEConfig()
    assert run.scene == SceneSpec()
    assert run.optimizer == OptimizerConfig()
    assert run.auc == AucSpec()
    assert run.essential_ransac == RansacConfig()
    assert run.homography_ransac.inlier_threshold == pytest.approx(5e-3)
    assert run.pairs == 100
    assert run.arms == (ARM_RAW, ARM_RANSAC)
    assert run.threads is None
    assert run.training_seed == 0
    assert not run.explicit


def test_file_overrides_and_flags(config_file: Path) -> None:
    """Flags beat --set overrides, which beat the file, which beats the defaults."""
    run = load_run_config(
        config_file,
        ["model.layers=3", "run.threads=1"],
        [("run", "threads", 2)],
    )

    assert run.model.layers == 3
    assert run.model.channels == 16
    assert run.model.sub_fields == GeoMoEConfig().sub_fields
    assert run.scene.points_per_pair == 32
    assert run.threads == 2
    assert run.sets_section("model")
    assert run.sets_section("scene")
    assert not run.sets_section("loss")
    assert "model.channels" in run.explicit


def test_exponent_without_a_dot() -> None:
    """1e-3 is read as a number."""
    run = load_run_config(overrides=["training.learning_rate=1e-3"])

    assert run.optimizer.learning_rate == pytest.approx(1e-3)


def test_parse_override() -> None:
    """The value part is read as YAML."""
    assert parse_override("evaluation.arms=[raw, oracle]") == (
        "evaluation",
        "arms",
        ["raw", "oracle"],
    )
    assert parse_override("model.probability_injection=false") == (
        "model",
        "probability_injection",
        False,
    )


@pytest.mark.parametrize("text", ["model.layers", "layers=3", "model.a.b=1", "=1"])
def test_parse_override_rejects_bad_forms(text: str) -> None:
    """Overrides need exactly one section, one key and a value."""
    with pytest.raises(InvalidConfigException):
        parse_override(text)


@pytest.mark.parametrize(
    ("override", "key"),
    [
        ("model.depth=3", "model.depth"),
        ("model.layers=two", "model.layers"),
        ("extra.key=1", "extra"),
        ("scene.outlier_ratio=1.2", "scene.outlier_ratio"),
        ("model.top_k=5", "model.top_k"),
        ("auc.method=spline", "auc.method"),
        ("evaluation.arms=[magic]", "evaluation.arms.0"),
        ("dataset.pairs=0", "dataset.pairs"),
    ],
)
def test_invalid_values_name_their_key(override: str, key: str) -> None:
    """Every rejection carries the dotted path of the offending value."""
    with pytest.raises(InvalidConfigException) as err:
        load_run_config(overrides=[override])

    assert err.value.key == key
    assert key in str(err.value)


def test_unreadable_config_files(tmp_path: Path) -> None:
    """Missing files and non-mapping documents are config errors."""
    with pytest.raises(InvalidConfigException):
        load_run_config(tmp_path / "missing.yaml")

    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(InvalidConfigException):
        load_run_config(path)


def test_empty_config_file(tmp_path: Path) -> None:
    """An empty file means all defaults."""
    path = tmp_path / "empty.yaml"
    path.write_text("", encoding="utf-8")

    assert load_run_config(path).model == GeoMoEConfig()


def test_sidecar_round_trip(tmp_path: Path, config_file: Path) -> None:
    """The echoed configuration loads back to the same document."""
    run = load_run_config(config_file)
    path = write_sidecar(tmp_path / "pairs.gmds", run)

    assert path == sidecar_path(tmp_path / "pairs.gmds")
    assert path.name == "pairs.gmds.config.yaml"
    assert load_run_config(path).document == run.document


def test_with_model_updates_the_document() -> None:
    """A checkpoint's model replaces the model section and its echo."""
    model = GeoMoEConfig(layers=2, channels=8, sub_fields=4, loc_k=4)
    run = load_run_config().with_model(model)

    assert run.model == model
    assert run.document["model"]["sub_fields"] == 4
    assert "sub_fields: 4" in run.to_yaml()


def test_help_epilog_lists_every_key() -> None:
    """Each key appears with its default."""
    epilog = help_epilog()

    assert "  model.layers = 8" in epilog
    assert "  auc.method = histogram" in epilog
    assert "  auc.thresholds_deg = [5.0, 10.0, 20.0]" in epilog
    assert "  run.threads = 0" in epilog
