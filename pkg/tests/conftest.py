import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("repo")


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f(x)
        flat[k] = old - h
        down = f(x)
        flat[k] = old
        gflat[k] = (up - down) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance bookkeeping: one PASS/FAIL line per criterion in the summary --

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "seconds": 0.0})
    entry["ok"] &= rep.passed
    entry["seconds"] += rep.duration


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        terminalreporter.write_line(
            f"{'PASS' if e['ok'] else 'FAIL'}  criterion {number:>2}: {e['title']} ({e['seconds']:.1f}s)")
