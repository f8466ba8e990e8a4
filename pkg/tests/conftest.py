import numpy as np
import pytest

from fbbench import ClusterDataset, sa_province_graph

TRUE_P = np.round(0.28 + 0.01 * np.arange(9), 2)


def simulate(clusters_per_area, seed, trials=100, p=TRUE_P):
    rng = np.random.default_rng(seed)
    area = np.repeat(np.arange(p.size), clusters_per_area)
    n = np.full(area.size, trials)
    return ClusterDataset(area, n, rng.binomial(n, p[area]), p.size)


@pytest.fixture(scope="session")
def graph():
    return sa_province_graph()


@pytest.fixture(scope="session")
def small_data():
    return simulate(10, seed=11)


# acceptance criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
