import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from svanet.core import Rng, Tensor

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def rand(rng: np.random.Generator, *shape, grad=True, dtype=np.float64) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=grad)


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


@pytest.fixture
def rng():
    return Rng(7, "tests")


# -- acceptance reporting ------------------------------------------------------

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "notes": []})
    failed = report.failed or hasattr(report, "wasxfail") or (report.skipped and report.when != "teardown")
    if report.when == "call" or failed:
        entry["ok"] &= not failed
        if hasattr(report, "wasxfail"):
            entry["notes"].append(f"expected failure: {report.wasxfail}")
        elif report.skipped:
            entry["notes"].append("skipped")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] else "FAIL"
        note = f" ({'; '.join(dict.fromkeys(entry['notes']))})" if entry["notes"] else ""
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {entry['title']}{note}")
