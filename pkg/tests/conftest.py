import numpy as np
import pytest

from edpa.data import DatasetSpec, generate_dataset
from edpa.encoders import Geometry, init_encoders

TINY_GEOMETRY = Geometry(height=32, width=32, patch_size=16, dim=6)
TINY_DATA = dict(height=32, width=32, tile=8, min_radius=3, max_radius=4, distractor_min_radius=1.5, distractor_max_radius=2.0)


@pytest.fixture(scope="session")
def tiny_encoders():
    return init_encoders(TINY_GEOMETRY, np.random.default_rng(11))


@pytest.fixture(scope="session")
def tiny_samples():
    return generate_dataset(DatasetSpec(count=24, seed=5, **TINY_DATA))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
