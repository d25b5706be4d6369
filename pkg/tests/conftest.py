import numpy as np
import pytest

from slq import autodiff as ad


@pytest.fixture
def f64():
    """Run the test with float64 as the default tensor dtype."""
    prev = ad.get_default_dtype()
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; lines are echoed in the summary."""
    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
