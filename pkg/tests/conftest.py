from __future__ import annotations

import pytest

from greensim.catalog import Catalog
from greensim.settings import load_settings
from greensim.tuner import tune_exhaustive


@pytest.fixture(scope="session")
def catalog():
    return Catalog.load()


@pytest.fixture(scope="session")
def settings():
    return load_settings()


@pytest.fixture(scope="session")
def demo_settings():
    return load_settings("exploit-demo.json")


@pytest.fixture(scope="session")
def s9150(catalog):
    return catalog.gpus["S9150"]


@pytest.fixture(scope="session")
def green500(catalog):
    return catalog.cluster("lcsc-green500")


@pytest.fixture(scope="session")
def exhaustive(green500, settings):
    # about 15 s; shared by the tuner tests and the acceptance gate
    return tune_exhaustive(green500, settings.search_space, settings.sim, settings.profile,
                           max_points=settings.max_points)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(RESULTS, key=lambda c: int(c[1:])):
            terminalreporter.write_line(RESULTS[cid][1])
