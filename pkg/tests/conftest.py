import numpy as np
import pytest

from mscnn.model import NetworkConfig, build_network

SEEDS = (0, 1, 2, 3, 4)


def tiny_config(variant="proposed", num_classes=3, **kw):
    """Full wiring with every width cut down so gradient checks stay cheap."""
    kw.setdefault("width_divisor", 512)
    kw.setdefault("channel_divisor", 16)
    return NetworkConfig.paper(variant, num_classes, **kw)


@pytest.fixture
def tiny_net():
    return build_network(tiny_config(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
