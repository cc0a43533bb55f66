from typing import Callable

import pytest

from lpnum.common.config import TrainConfig
from lpnum.common.data import Dataset, SyntheticSpec, synthesize
from lpnum.common.network import NetworkState, SchemeConfig, Topology, build_topology
from lpnum.common.qformats import RoundingMode


@pytest.fixture
def small_topology() -> Topology:
    # 16x16 inputs: conv/pool blocks give 7x7, 3x3 and 1x1 maps
    return build_topology((3, 16, 16), classes=3, widths=(2, 3, 4), fc_width=6)


@pytest.fixture
def synthetic_spec() -> SyntheticSpec:
    return SyntheticSpec(classes=3, samples_per_class=8, image_size=16, separation=2.0, seed=0)


@pytest.fixture
def train_set(synthetic_spec: SyntheticSpec) -> Dataset:
    return synthesize(synthetic_spec, "train")


@pytest.fixture
def test_set(synthetic_spec: SyntheticSpec) -> Dataset:
    return synthesize(synthetic_spec, "test")


@pytest.fixture
def make_state(small_topology: Topology) -> Callable[..., NetworkState]:
    def _make(scheme: str = "float12", rounding: RoundingMode = RoundingMode.STOCHASTIC, seed: int = 0,
              kernel: str = "exact", debug: bool = False) -> NetworkState:
        return NetworkState(small_topology, SchemeConfig.from_name(scheme), rounding, seed=seed, kernel=kernel,
                            debug=debug)

    return _make


@pytest.fixture
def train_config() -> TrainConfig:
    return TrainConfig(learning_rate=0.01, batch_size=8, epochs=2)
