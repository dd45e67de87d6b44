import functools

import numpy as np
import pytest

from textrectify import synth


@functools.lru_cache(maxsize=None)
def cached_case(seed: int, difficulty: str):
    return synth.gen_case(seed, difficulty)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
