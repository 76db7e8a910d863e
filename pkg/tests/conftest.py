import numpy as np
import pytest

from hybridbev.geometry import BevGrid, CameraCalib, DepthBins

# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number: int, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_grid():
    return BevGrid(-4.0, 4.0, 0.0, 8.0, 8, 8)


@pytest.fixture
def toy_camera():
    """A forward camera over a 4x4 feature map with 6 depth bins."""
    bins = DepthBins(1.0, 9.0, 6)
    grid = BevGrid(-4.0, 4.0, 0.0, 8.0, 4, 4)
    calib = CameraCalib.forward_camera(2.0, 2.0, 2.0, 0.5)
    return bins, grid, calib
