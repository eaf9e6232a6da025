import numpy as np
import pytest

from nptest import eigenbasis as eb


@pytest.fixture(scope="session")
def trig5():
    return eb.build_trig_basis(2, 5)


@pytest.fixture(scope="session")
def trig101():
    return eb.build_trig_basis(2, 101)


@pytest.fixture(scope="session")
def equispaced512():
    x = (np.arange(512) + 0.5) / 512
    return x, eb.build_empirical_basis(x, 2, N=21)


def single_pair(rho=0.0):
    """One flat eigenfunction with eigenvalue ``rho``."""
    return eb.EigenSystem.from_functions(
        1, [rho], lambda x: np.ones((np.size(x), 1)), c_phi=1.0
    )


def flat_system(N):
    """``N`` pairs with zero eigenvalues (constant eigenfunctions, only sums matter)."""
    return eb.EigenSystem.from_functions(1, np.zeros(N), lambda x: np.ones((np.size(x), N)), c_phi=1.0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []
# study tables (title, csv text) shown after the criteria
ACCEPTANCE_TABLES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
    for title, text in ACCEPTANCE_TABLES:
        terminalreporter.write_line("")
        terminalreporter.write_line(title)
        for row in text.splitlines():
            terminalreporter.write_line(row)
