import numpy as np
import pytest

from aerodepth import numcore as nc


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def graph():
    g = nc.Graph()
    with g.active():
        yield g


def leaf(data, dtype=np.float64):
    """Gradient-requiring tensor; 64-bit unless asked otherwise."""
    with nc.float64_mode() if dtype == np.float64 else _null():
        return nc.Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False
