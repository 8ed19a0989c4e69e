import numpy as np
import pytest
from scipy.ndimage import gaussian_filter


def smooth_volume(rng, shape, sigma=1.5):
    """Random band-limited texture scaled to [0, 1]."""
    a = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    a -= a.min()
    return a / a.max()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_registry import summary_lines

    lines = list(summary_lines())
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
