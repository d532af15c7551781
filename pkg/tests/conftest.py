import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fdhybf.chybf import init_state
from fdhybf.model import NoiseProfile, Weights
from fdhybf.scenario import draw_network_channels, make_rng
from fdhybf.verification import small_config

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def rel(a, b):
    den = np.linalg.norm(b)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / (den if den > 0 else 1.0))


class Instance:
    """Config, channels, initial state, noise and weights of one seed."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.seed = seed
        self.channels = draw_network_channels(make_rng(seed), cfg)
        self.state = init_state(cfg, self.channels)
        self.noise = NoiseProfile.from_config(cfg)
        self.weights = Weights.uniform(cfg)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def small():
    return Instance(small_config(), seed=0)
