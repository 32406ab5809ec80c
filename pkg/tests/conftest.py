import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance verdicts -----------------------------------------------------

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records one part of acceptance criterion ``n``."""
    table = request.config.stash[_VERDICTS]

    def record(n: int, ok: bool, detail: str) -> bool:
        table.setdefault(n, []).append((bool(ok), detail))
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_VERDICTS, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        parts = table[n]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2}: {status}  " + "; ".join(d for _, d in parts))
