import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qatgate import msgate

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, name: str, passed: bool, detail: str) -> None:
    """Record one acceptance line; printed again in the terminal summary."""
    line = f"criterion {criterion} [{name}]: {'PASS' if passed else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_flat():
    """Flat single-tone gate on a small Fock space."""
    return msgate.fig2_scenario(n_max=16)


@pytest.fixture(scope="session")
def small_shaped():
    return msgate.shaped_scenario(n_max=12)


def random_hermitian(rng, d, scale=1.0):
    x = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return scale * (x + x.conj().T) / 2


def random_unitary(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d)))
    return q * (np.diag(r) / np.abs(np.diag(r)))


def spectral(a):
    return float(np.linalg.norm(a, 2))


SQRT5 = math.sqrt(5)
