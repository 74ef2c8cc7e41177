import numpy as np
import pytest
import torch

from helpers import GuidanceStub

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def guidance_stub():
    stub = GuidanceStub()
    yield stub
    stub.close()
