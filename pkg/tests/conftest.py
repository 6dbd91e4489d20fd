import numpy as np
import pytest
import torch

from maskdiffrec.config import RunConfig
from maskdiffrec.corpus import split_chronological
from maskdiffrec.denoiser import ConsistencyDenoiser
from maskdiffrec.schedule import NoiseSchedule
from maskdiffrec.synthetic import two_block_corpus


@pytest.fixture(scope="session")
def block_log():
    return two_block_corpus(seed=0)


@pytest.fixture(scope="session")
def block_split(block_log):
    return split_chronological(block_log)


@pytest.fixture()
def sched():
    return NoiseSchedule(horizon=60.0)


@pytest.fixture()
def tiny_model():
    torch.manual_seed(0)
    return ConsistencyDenoiser(
        n_users=5, n_items=12, seq_len=6, horizon=10.0, dim=16, n_layers=1, n_heads=2
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture()
def small_config():
    """Config small enough for seconds-scale end-to-end runs in tests."""
    return RunConfig(
        dim=32, n_layers=1, epochs=6, batch_size=64, mf_epochs=5, sample_steps=1
    )
