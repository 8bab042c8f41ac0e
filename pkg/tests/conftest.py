import json
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from hyperext.extension import hyperharmonic_extension
from hyperext.spheremap import SphereGrid, make_test_map

ORACLES = json.loads((Path(__file__).parent / "oracles.json").read_text())


@pytest.fixture(scope="session")
def oracles():
    return ORACLES


@lru_cache(maxsize=None)
def circle_map(desc: str, m: int = 512):
    return make_test_map(desc, SphereGrid.circle(m))


@lru_cache(maxsize=None)
def sphere_map(desc: str, lat: int = 48):
    return make_test_map(desc, SphereGrid.sphere(lat))


@lru_cache(maxsize=None)
def circle_field(desc: str, m: int = 512):
    return hyperharmonic_extension(circle_map(desc, m))


@lru_cache(maxsize=None)
def sphere_field(desc: str, lat: int = 48):
    return hyperharmonic_extension(sphere_map(desc, lat))


@pytest.fixture
def rng():
    return np.random.default_rng(20241016)


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE: list = []


@pytest.fixture
def detail(request):
    """Free-form notes a criterion test attaches to its summary line."""
    notes: dict = {}
    request.node.acceptance_detail = notes
    return notes


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        notes = getattr(item, "acceptance_detail", {})
        ACCEPTANCE.append((marker.args[0], marker.args[1], rep.passed, rep.duration, dict(notes)))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, duration, notes in sorted(ACCEPTANCE, key=lambda r: r[0]):
        extra = "; ".join(f"{k}={v}" for k, v in notes.items())
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{verdict} criterion {number:2d} {title} ({duration:.1f}s) {extra}".rstrip())
