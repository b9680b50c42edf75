import numpy as np
import pytest

from perihom.model import Coefficient, CoefficientModel, KernelSpec

COS1 = Coefficient("cosine", base=2.0, amplitude=1.0, frequencies=(1, 0))
COS12 = Coefficient("cosine", base=2.0, amplitude=1.0, frequencies=(1, 1))
RCOS1 = Coefficient("reciprocal-cosine", base=2.0, amplitude=1.0, frequencies=(1, 0))


@pytest.fixture
def indicator():
    return KernelSpec("radial-indicator", 2, 0.4)


@pytest.fixture
def gaussian():
    return KernelSpec("radial-gaussian", 2, 0.15)


@pytest.fixture
def cone():
    return KernelSpec("cone-restricted", 2, 0.4, axis=(1.0, 0.0), aperture=0.5)


@pytest.fixture
def homogeneous():
    return CoefficientModel()


@pytest.fixture
def hetero():
    """mu = 2 + cos(2 pi y1), bounds [1, 3]."""
    return CoefficientModel(mu=COS1, alpha1=1.0, alpha2=3.0)


@pytest.fixture
def hetero_lambda():
    """mu = 2 + cos(2 pi y1) cos(2 pi y2), lambda1 = 1 / (2 + cos(2 pi y1))."""
    return CoefficientModel(mu=COS12, lambda1=RCOS1, alpha1=1.0 / 3.0, alpha2=3.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Store the one-line verdict of an acceptance criterion and echo it."""
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
