import numpy as np
import pytest

from measopt.prior import PriorDataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_dataset(rng, n, shape, scale=1.0):
    return PriorDataset(rng.uniform(-scale, scale, size=(n, *shape)))


@pytest.fixture
def small_ds(rng):
    return random_dataset(rng, 4, (2, 4, 1))


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(ok, detail)``."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    name = request.node.name

    def record(ok: bool, detail: str) -> None:
        line = f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"
        _ACCEPTANCE_LINES.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
