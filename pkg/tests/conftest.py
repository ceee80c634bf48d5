import numpy as np
import pytest

from matchlab.instances import worked_example


@pytest.fixture
def table1():
    """Three agents a,b,c over items A,B,C; the running example."""
    return worked_example()


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
