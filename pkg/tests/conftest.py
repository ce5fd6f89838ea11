import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ssca.pipeline import train_erm
from ssca.testbed import ShortcutDatasetConfig, generate
from ssca.tinynet import Arch, TrainConfig


@pytest.fixture(scope="session")
def seed0_testbed():
    """Default-sized testbed, seed 0; shared by the acceptance tests."""
    return generate(ShortcutDatasetConfig(rng_seed=0))


@pytest.fixture(scope="session")
def seed0_erm_params(seed0_testbed):
    """An ERM model trained at the default budget on the seed-0 testbed."""
    arch = Arch(32, 32, 3, 4)
    result = train_erm(seed0_testbed, arch, TrainConfig(epochs=15, rng_seed=0))
    return result.params
