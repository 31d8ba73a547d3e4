import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def face():
    from facerenov.data import render_face

    return render_face(7, 64)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield
