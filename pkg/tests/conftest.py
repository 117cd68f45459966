"""
Shared fixtures for the gridbayes test suite.

Fixtures:
- rng: seeded generator per test
- small_grid / network_config: grids and networks small enough for fast tests
- tiny_scenario / tiny_dataset_dir: a generated dataset shared by the session
- trained_checkpoint: short training runs per variant, cached per session

Tests marked `slow` train at desk scale and only run with --runslow.
"""

from pathlib import Path
from typing import Callable, Dict

import numpy as np
import pytest

from gridbayes.models import Variant
from gridbayes.schemas import (
    GridSpec,
    LidarConfig,
    NetworkConfig,
    OODConfig,
    RadarConfig,
    RangeConfig,
    ScenarioConfig,
    TrainConfig,
)
from gridbayes.services import Checkpoint, DatasetService, TrainingService, WorldService

TINY_TRAIN = 6
TINY_TEST = 3


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid() -> GridSpec:
    return GridSpec(c_l=8, c_w=8, cell_size=1.0)


@pytest.fixture
def network_config() -> Callable[..., NetworkConfig]:
    """Factory for an 8 x 8 network with one two-branch ASPP block"""

    def make(variant: Variant = Variant.DETERMINISTIC, **overrides) -> NetworkConfig:
        values = dict(variant=variant, c_l=8, c_w=8, aspp_layers=1, branch_channels=2, dilations=[1, 2])
        values.update(overrides)
        return NetworkConfig(**values)

    return make


def make_tiny_scenario(**overrides) -> ScenarioConfig:
    values = dict(
        seed=7,
        grid=GridSpec(c_l=16, c_w=16, cell_size=1.0),
        frames=2,
        walls=RangeConfig(min=1, max=1),
        wall_length=RangeConfig(min=3.0, max=5.0),
        boxes=RangeConfig(min=1, max=2),
        moving=RangeConfig(min=1, max=1),
        pedestrians=RangeConfig(min=0, max=1),
        keep_out=2.0,
        radar=RadarConfig(angular_resolution_deg=4.0, max_range=12.0),
        lidar=LidarConfig(angular_resolution_deg=3.0, max_range=10.0, ground_start=1.0, ground_step=1.0),
        ood=OODConfig(count=RangeConfig(min=1, max=2)),
    )
    values.update(overrides)
    return ScenarioConfig(**values)


@pytest.fixture
def tiny_scenario() -> ScenarioConfig:
    return make_tiny_scenario()


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("tiny_dataset")
    WorldService.generate_dataset(make_tiny_scenario(), TINY_TRAIN, TINY_TEST, out)
    return out


def tiny_network_config(variant: Variant) -> NetworkConfig:
    return NetworkConfig(variant=variant, c_l=16, c_w=16, aspp_layers=1, branch_channels=4, dilations=[1, 2])


@pytest.fixture(scope="session")
def trained_checkpoint(tiny_dataset_dir) -> Callable[[Variant], Checkpoint]:
    """Two-epoch checkpoints on the tiny dataset, trained once per variant"""
    cache: Dict[Variant, Checkpoint] = {}
    train = DatasetService.load_dataset(tiny_dataset_dir, "train")

    def get(variant: Variant) -> Checkpoint:
        if variant not in cache:
            cfg = TrainConfig(variant=variant, epochs=2, batch_size=2, lr=1e-2, seed=3)
            cache[variant] = TrainingService.train(train, cfg, network_cfg=tiny_network_config(variant))
        return cache[variant]

    return get
