import numpy as np
import pytest

from pairsplat.scene import GaussianField, logit, make_orbit_cameras


def small_field(rng: np.random.Generator, n: int = 5, spread: float = 0.3) -> GaussianField:
    """Random primitives that stay on screen for a 16x16 orbit camera at radius 3."""
    pos = rng.uniform(-spread, spread, (n, 3))
    log_scale = np.log(rng.uniform(0.08, 0.25, (n, 3)))
    quat = rng.normal(size=(n, 4))
    opacity = logit(rng.uniform(0.2, 0.7, n))
    color = rng.normal(size=(n, 3))
    return GaussianField(np.concatenate([pos, log_scale, quat, opacity[:, None], color], axis=1))


@pytest.fixture
def cam16():
    return make_orbit_cameras(1, 3.0, width=16, height=16, fov_deg=40.0)[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
