import numpy as np
import pytest

from mart import tensor as T


@pytest.fixture(autouse=True)
def fresh_tape():
    # each test starts with float32 and an empty tape
    T.set_dtype(np.float32)
    T.new_tape()
    yield
    T.set_dtype(np.float32)
    T.new_tape()


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns the verdict."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        print(line)
        lines.append((number, line))
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
