import numpy as np
import pytest
import torch

from lesionseg.synthetic import SyntheticSpec, generate_synthetic_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_cases():
    """Five noisy synthetic cases at the default desk-scale geometry."""
    return generate_synthetic_dataset(SyntheticSpec(n_cases=5, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
