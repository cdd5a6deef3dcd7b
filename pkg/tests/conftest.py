from dataclasses import replace

import numpy as np
import pytest

from app.config import AppConfig
from app.datasets import SynthSpec, synth_sequence
from app.model import SataNetwork
from app.training import small_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg() -> AppConfig:
    return small_config()


@pytest.fixture
def small_net(small_cfg) -> SataNetwork:
    return SataNetwork.create(small_cfg, seed=0)


@pytest.fixture
def handcrafted_cfg(small_cfg) -> AppConfig:
    """25 px handcrafted geometry, no learned backbone."""
    return replace(small_cfg, backbone=replace(small_cfg.backbone, kind="handcrafted"))


@pytest.fixture
def handcrafted_net(handcrafted_cfg) -> SataNetwork:
    return SataNetwork.create(handcrafted_cfg, seed=0)


@pytest.fixture
def tiny_sequence():
    return synth_sequence(SynthSpec(size=(48, 64), target_size=(8.0, 8.0), velocity=(1.0, 0.0),
                                    frames=6, seed=3, name="tiny"))
