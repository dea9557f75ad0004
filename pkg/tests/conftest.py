import numpy as np
import pytest
import torch

from selfreg_unet.unet import FeatureTap, UNetConfig, build_unet, tap_registry, tap_shapes

ACCEPTANCE_LINES = []


def toy_config(**kw):
    params = dict(base_channels=4, input_size=(16, 16), seed=0)
    params.update(kw)
    return UNetConfig(**params)


@pytest.fixture
def toy_model():
    return build_unet(toy_config(), dtype=torch.float64)


def random_taps(rng, config=None, batch=1, scale=1.0):
    """Random float64 taps with the shapes a ``config`` model would produce."""
    config = config or toy_config()
    return [
        FeatureTap(addr, torch.as_tensor(scale * rng.standard_normal((batch, *shape))))
        for addr, shape in tap_shapes(config).items()
    ]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
