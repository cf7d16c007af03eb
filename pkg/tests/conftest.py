from __future__ import annotations

import pytest

from mgprotect.simulator import SimSettings


@pytest.fixture(scope="session")
def short_settings():
    """Shortened horizon for unit tests; dynamics and step size are unchanged."""
    return SimSettings(sim_length=0.25, preroll=0.3)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
