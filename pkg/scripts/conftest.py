import os
import sys

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from vbtta.mathstats import Rng
from vbtta.predictor import MlpModel, init_mlp
from validate_acceptance import mixture_problem  # noqa: F401


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def tiny_model():
    return init_mlp((3, 6, 5, 1), Rng(7))


def linear_model(a, bias=0.0):
    a = np.asarray(a, dtype=float)
    return MlpModel((a.shape[0], 1), [a.reshape(-1, 1)], [np.array([float(bias)])])


class QuadraticModel:
    """f(x) = ‖x‖², duck-typed like MlpModel for moment computations"""
    output_dim = 1

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        return np.sum(x ** 2, axis=-1, keepdims=True)

    def input_gradient(self, x):
        return 2.0 * np.asarray(x, dtype=float)[None, :]

