import random

import pytest

from cnnpipe import load_fixture


@pytest.fixture(scope="session")
def fixtures():
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = load_fixture(name)
        return cache[name]

    return get


@pytest.fixture
def rng():
    return random.Random(20240611)
