import numpy as np
import pytest

from maskscope.structures import Prediction, Taxonomy


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def four_class_taxonomy():
    return Taxonomy(things={0, 1}, stuff={2, 3}, road=3)


def make_prediction(C, M, no_object=False):
    return Prediction(np.asarray(C, dtype=float), np.asarray(M, dtype=float), no_object=no_object)
