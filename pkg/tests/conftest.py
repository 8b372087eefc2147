import numpy as np
import pytest

from ctfg import diffcore as dc


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def checked_mode():
    with dc.checked(True):
        yield


@pytest.fixture(scope="session")
def acceptance(request):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(n: int, ok: bool, detail: str):
        lines.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        print(lines[-1])
        return ok

    return record


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
