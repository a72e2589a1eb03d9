import numpy as np
import pytest

from mcrmri.phantom import PhantomSpec, generate
from mcrmri.pipeline import RunConfig, run_decomposition


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def phantom_series():
    return generate(PhantomSpec())


@pytest.fixture(scope="session")
def phantom_run(phantom_series):
    """Default pipeline (non-negativity + normalisation) on the default phantom."""
    frames, truth = phantom_series
    result, stack, masks, selection = run_decomposition(RunConfig(), frames)
    return result, stack, masks, truth


def pytest_terminal_summary(terminalreporter):
    from support import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
