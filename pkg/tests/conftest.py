import numpy as np
import pytest

from countgen import annotations as ann


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_dmap(rng, shape=(16, 16), scale=0.02) -> ann.DensityMap:
    return ann.DensityMap(values=np.abs(rng.standard_normal(shape)) * scale)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
