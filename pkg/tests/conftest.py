"""Global fixtures for the geomoe tests."""
# Fixtures defined here are available to every test module. Scenes are small
# and seeded so each test sees the same data on every run.
from __future__ import annotations

import pytest

from geomoe.models import GeneratedPair, GeoMoEConfig, SceneSpec
from geomoe.network import ModelCheckpoint
from geomoe.synthetic import generate_pair

TEST_POINTS = 64
TEST_SCENE_SEED = 7


@pytest.fixture(name="clean_spec")
def clean_spec_fixture() -> SceneSpec:
    """Noise-free, outlier-free scene over three depth planes."""
    return SceneSpec(
        noise_sigma=0.0,
        outlier_ratio=0.0,
        points_per_pair=TEST_POINTS,
        seed=TEST_SCENE_SEED,
    )


@pytest.fixture(name="clean_pair")
def clean_pair_fixture(clean_spec: SceneSpec) -> GeneratedPair:
    """A pair where every correspondence is an exact inlier."""
    return generate_pair(clean_spec, 0)


@pytest.fixture(name="planar_pair")
def planar_pair_fixture() -> GeneratedPair:
    """A noise-free single-plane pair with a ground-truth homography."""
    spec = SceneSpec(
        num_structures=1,
        noise_sigma=0.0,
        outlier_ratio=0.0,
        points_per_pair=TEST_POINTS,
        seed=TEST_SCENE_SEED,
    )
    return generate_pair(spec, 0)


@pytest.fixture(name="outlier_pair")
def outlier_pair_fixture() -> GeneratedPair:
    """A noise-free pair where 30% of the correspondences were replaced."""
    spec = SceneSpec(
        noise_sigma=0.0,
        outlier_ratio=0.3,
        points_per_pair=128,
        seed=TEST_SCENE_SEED,
    )
    return generate_pair(spec, 0)


@pytest.fixture(name="noisy_pair")
def noisy_pair_fixture() -> GeneratedPair:
    """A pair drawn with the default noise and outlier ratio."""
    return generate_pair(SceneSpec(points_per_pair=TEST_POINTS, seed=TEST_SCENE_SEED))


@pytest.fixture(name="tiny_config")
def tiny_config_fixture() -> GeoMoEConfig:
    """A network small enough for finite-difference checks."""
    return GeoMoEConfig(
        layers=2, channels=8, sub_fields=4, experts=4, top_k=2, loc_k=4, init_seed=3
    )


@pytest.fixture(name="tiny_checkpoint")
def tiny_checkpoint_fixture(tiny_config: GeoMoEConfig) -> ModelCheckpoint:
    """A freshly initialized tiny model."""
    return ModelCheckpoint.initialize(tiny_config)
