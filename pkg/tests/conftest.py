import numpy as np
import pytest

_CRITERIA = {}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run long suites marked slow")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running suites, enabled with --runslow")
    config.addinivalue_line("markers", "criterion(k, title): acceptance criterion number k")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="slow suite; pass --runslow to run it")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        k, title = mark.args
        entry = _CRITERIA.setdefault(k, {"title": title, "results": []})
        entry["results"].append((item.name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        entry = _CRITERIA[k]
        outcomes = [o for _, o in entry["results"]]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif "passed" in outcomes:
            verdict = "PASS"
        else:
            verdict = "SKIP"
        skipped = [name for name, o in entry["results"] if o == "skipped"]
        note = f" ({len(skipped)} part(s) skipped: {', '.join(skipped)})" if skipped and verdict != "SKIP" else ""
        terminalreporter.write_line(f"criterion {k}: {verdict}: {entry['title']}{note}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
