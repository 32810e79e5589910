import numpy as np
import pytest

from melgraph import autodiff as ad


@pytest.fixture(autouse=True)
def _fresh_tape():
    ad.get_tape().clear()
    yield
    ad.get_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------------------------ acceptance report

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if n not in _criteria or rep.failed:
        _criteria[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status, detail = _criteria[n]
        terminalreporter.write_line(f"{status} criterion {n:2d}: {title}" + (f" ({detail})" if detail else ""))
