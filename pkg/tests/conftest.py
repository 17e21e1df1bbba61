import pytest

from forkspace import Engine, build_workspace
from forkspace.traces import SMALL_SPEC
from forkspace.workspace import CHROMIUM_SPEC


@pytest.fixture(scope="session")
def small_state():
    return build_workspace(SMALL_SPEC)


@pytest.fixture(scope="session")
def chromium_state():
    return build_workspace(CHROMIUM_SPEC)


@pytest.fixture
def engine():
    e = Engine()
    yield e
    e.close()


@pytest.fixture
def loaded(engine, small_state):
    return engine, engine.load(small_state)


_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def check(num: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _CRITERIA[num] = line
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for num in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[num])
