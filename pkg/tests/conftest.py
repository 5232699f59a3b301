import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tsta import GridSpec

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], print_blob=True
)
settings.load_profile("default")


@pytest.fixture
def grid444():
    # 4x4x4 tokens in 2x2x2 tiles: 8 tiles of 8 tokens
    return GridSpec(4, 4, 4, 2, 2, 2)


@pytest.fixture
def tile_grid64():
    # 4x4x4 tile extents with single-token tiles
    return GridSpec(4, 4, 4, 1, 1, 1)

