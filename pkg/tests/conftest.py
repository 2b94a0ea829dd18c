import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from reviewlearn.data import make_institutions  # noqa: E402
from reviewlearn.loop import HyperParams  # noqa: E402
from scenarios import run_forgetting_study, sites_for  # noqa: E402

ACCEPTANCE_RESULTS: list = []


@pytest.fixture(scope="session")
def forgetting_study():
    return run_forgetting_study()


@pytest.fixture(scope="session")
def small_institutions():
    """Three raw institutions at 0/90/90 degrees, sizes 600/500/400."""
    return make_institutions(sites_for([0, 90, 90], [600, 500, 400], 0, case_ratio=0.15), seed=0)


@pytest.fixture
def quick_hyper():
    return HyperParams(max_epochs=4, hidden=(16,), n_generated=64, extraction_steps=100, patience=5)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name}  {detail}")
