import numpy as np
import pytest
import torch

import msumamba as m


@pytest.fixture(autouse=True)
def _fixed_threads():
    torch.set_num_threads(2)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def np_rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_cfg():
    return m.tiny_config(seed=0)


@pytest.fixture
def small_phantoms():
    spec = m.PhantomSpec(canvas=(64, 64))
    return [m.generate_phantom(s, spec) for s in range(4)]
