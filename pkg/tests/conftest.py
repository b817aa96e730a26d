import numpy as np
import pytest

from bodyfit.primitives import icosphere, planar_grid


@pytest.fixture(scope="session")
def fine_sphere():
    return icosphere(6)


@pytest.fixture(scope="session")
def fine_grid():
    return planar_grid(201, 201)


@pytest.fixture(scope="session")
def small_body():
    from bodyfit.synth import SynthBodyParams, generate_body

    return generate_body(SynthBodyParams(), 0.04)


def random_rigid(rng):
    """Random proper rotation and translation."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q, rng.normal(scale=2.0, size=3)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance")
        for line in sorted(mod.LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
