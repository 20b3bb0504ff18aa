import numpy as np
import pytest

from stereovox.geometry import CameraModel, GridSpec

# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def desk_camera():
    return CameraModel(128.0, 1.0, 128, 64)


@pytest.fixture
def desk_grid():
    return GridSpec.cubic(0.5, 32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
