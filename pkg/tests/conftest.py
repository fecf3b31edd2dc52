import numpy as np
import pytest

from npivband.simkit import DgpSpec, generate, rep_rng


@pytest.fixture(scope="session")
def sim_small():
    """One moderate draw from the simulation design, shared by the slower stage tests."""
    data, gprime = generate(DgpSpec(n=600, p=30, g_kind="g2", seed=11), rep_rng(11, 0))
    return data.demean(), gprime


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
