import numpy as np
import pytest

from riskgen.scorefn import RiskSpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def spec():
    return RiskSpec.single(0.05, 10.0)
