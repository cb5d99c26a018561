import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def scenario():
    from progfd import load_config, scenario_path

    cache = {}

    def load(name, *overrides):
        key = (name, overrides)
        if key not in cache:
            cache[key] = load_config(scenario_path(name), list(overrides))
        return cache[key]

    return load


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record a criterion's outcome, then assert it."""

    def record(number, title, ok, detail):
        ACCEPTANCE_LINES[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        print(ACCEPTANCE_LINES[number])
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
