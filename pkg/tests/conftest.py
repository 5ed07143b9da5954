import numpy as np
import pytest

from clipica.numcore import pca_reduce, zscore_rows
from clipica.simulation import SimSpec, simulate

_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit and report.when == "call":
        _ACCEPTANCE.append((crit, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    # parametrized criteria pass only if every case passes
    merged = {}
    for crit, outcome in _ACCEPTANCE:
        merged[crit] = merged.get(crit, True) and outcome == "passed"
    for crit in sorted(merged, key=lambda k: int(k.split()[0])):
        terminalreporter.write_line(f"[{'PASS' if merged[crit] else 'FAIL'}] {crit}")


def reduce_pair(d, c=None):
    c = c or d.s1.shape[0]
    x1 = zscore_rows(pca_reduce(d.x1, c).components)
    x2 = zscore_rows(pca_reduce(d.x2, c).components)
    return x1, x2


@pytest.fixture(scope="session")
def default_sim():
    return simulate(SimSpec(seed=0))


@pytest.fixture(scope="session")
def default_reduced(default_sim):
    return reduce_pair(default_sim)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
