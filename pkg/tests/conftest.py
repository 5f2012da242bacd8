import datetime as dt

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from airphys.dataset import VARIABLES, CityDailyPanel

settings.register_profile(
    "airphys", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("airphys")

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda ln: int(ln.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, print it, then assert it."""

    def record(number, title, ok, detail):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)
        assert ok, line

    return record


def make_panel(values, start=dt.date(2009, 1, 1), cities=None):
    """Panel from a (city, day, variable) array."""
    values = np.asarray(values, float)
    cities = cities or tuple(f"C{i}" for i in range(values.shape[0]))
    days = np.datetime64(start, "D") + np.arange(values.shape[1])
    return CityDailyPanel(tuple(cities), days, values)


@pytest.fixture
def panel_factory():
    return make_panel


@pytest.fixture
def random_panel():
    rng = np.random.default_rng(7)
    values = rng.uniform(1.0, 20.0, size=(2, 60, len(VARIABLES)))
    return make_panel(values)
