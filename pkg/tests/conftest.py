import numpy as np
import pytest

from kfdaseg.phantom import PhantomSpec, generate_phantom
from kfdaseg.volume import BrainMask, MultiChannelVolume, ScalarVolume


def make_volume(arrays, mask=None):
    """MultiChannelVolume from a dict of raw arrays (mask defaults to everything)."""
    first = next(iter(arrays.values()))
    mask = np.ones(first.shape, bool) if mask is None else mask
    return MultiChannelVolume({k: ScalarVolume(v) for k, v in arrays.items()}, BrainMask(mask))


@pytest.fixture(scope="session")
def small_phantom():
    spec = PhantomSpec(dims=(32, 32, 32), seed=5, bias_amplitude=0.1, streak_count=1)
    vol, truth = generate_phantom(spec)
    return spec, vol, truth


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
