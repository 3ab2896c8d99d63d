import functools

import pytest

from expdiag.simulator import generate, make_spec


@functools.lru_cache(maxsize=None)
def simulated(kind: str, seed: int, **overrides):
    """Cached simulation plus its ingested log (logs are immutable)."""
    sim = generate(make_spec(kind, seed, **overrides))
    return sim, sim.log()


@pytest.fixture(scope="session")
def sim_cache():
    return simulated


ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: slow end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
