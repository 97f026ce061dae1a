import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
MNIST_IMAGES = os.path.join(ROOT, "data", "mnist5k", "images-idx3-ubyte.gz")
MNIST_LABELS = os.path.join(ROOT, "data", "mnist5k", "labels-idx1-ubyte.gz")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import desk
    if desk.REPORT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(desk.REPORT_LINES):
            terminalreporter.write_line(line)
