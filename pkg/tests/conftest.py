from __future__ import annotations

import pytest

from helpers import SimBed


@pytest.fixture
def bed() -> SimBed:
    return SimBed()


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
