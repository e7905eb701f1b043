import sys

import numpy as np
import pytest

from uformer360 import tensor as T
from uformer360.networks import DiscriminatorConfig, GeneratorConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def tiny_generator_config(**kw):
    """32x64 input, two stages: fast enough for per-test construction."""
    base = dict(height=32, width=64, base_channels=8, depths=(1, 1), bottleneck_depth=1,
                window_size=4, head_dim=4, seed=3)
    base.update(kw)
    return GeneratorConfig(**base)


def tiny_discriminator_config(**kw):
    base = dict(height=32, width=64, base_channels=4, stages=5, seed=4)
    base.update(kw)
    return DiscriminatorConfig(**base)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
