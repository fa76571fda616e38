import numpy as np
import pytest
from hypothesis import settings

from papertrust.surface import SurfaceParams, generate_surface

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def surface():
    return generate_surface(SurfaceParams(32, 32, 3.0, 0.2, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_acceptance = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: one test per acceptance criterion")


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and (report.when == "call" or report.outcome != "passed"):
        if report.when == "call" or report.failed:
            measured = dict(report.user_properties).get("measured", "")
            _acceptance.append((report.nodeid.split("::")[-1], report.outcome, measured))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, measured in _acceptance:
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}  {measured}")
