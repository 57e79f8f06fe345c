import functools

import pytest

from strucid.ident import identifiability
from strucid.liegeo import RankOracle
from strucid.model import builtin


@functools.lru_cache(maxsize=None)
def analysed(name: str):
    """(affine model, data sets, identifiability result) for a builtin, computed once."""
    model, scenarios = builtin(name)
    return model, scenarios, identifiability(model, RankOracle())


@pytest.fixture
def oracle():
    return RankOracle()


ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
