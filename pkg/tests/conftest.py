import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pursuit import imagery


@pytest.fixture(scope="session")
def small_corpus():
    """Three normalized 96x96 synthetic textures."""
    return tuple(
        imagery.normalize_texture(imagery.synth_texture(seed, 96, 96))
        for seed in range(3)
    )


@pytest.fixture(scope="session")
def texture_96():
    return imagery.normalize_texture(imagery.synth_texture(11, 96, 96))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
