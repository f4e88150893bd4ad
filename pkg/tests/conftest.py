from __future__ import annotations

import numpy as np
import pytest

from ccdn.model import init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def params32():
    return init_params(seed=7)


@pytest.fixture(scope="session")
def params64():
    return init_params(seed=7, dtype=np.float64)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(RESULTS):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number} [{status}] {title}: {detail}")
