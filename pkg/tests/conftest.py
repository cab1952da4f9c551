import numpy as np
import pytest

from spgt.shape_model import pca_fit
from spgt.synth import gen_training_shapes


@pytest.fixture(scope="session")
def training_shapes():
    return gen_training_shapes(0, 20)


@pytest.fixture(scope="session")
def car_basis(training_shapes):
    return pca_fit(training_shapes, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
