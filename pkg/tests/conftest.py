import numpy as np
import pytest

from lre.tensor import GRAPH


@pytest.fixture(autouse=True)
def _fresh_graph():
    GRAPH.clear()
    yield
    GRAPH.clear()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
