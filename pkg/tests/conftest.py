import numpy as np
import pytest

from smda.autodiff import Graph


@pytest.fixture(autouse=True)
def fresh_graph():
    with Graph() as g:
        yield g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
