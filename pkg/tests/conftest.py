import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from typhoon_cddpm import ingestion, pipeline  # noqa: E402

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "tests": 0, "failed": []})
    if rep.when == "call":
        entry["tests"] += 1
    if rep.failed or (rep.when == "call" and rep.skipped):
        entry["ok"] = False
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["tests"] else "FAIL"
        extra = f" (failed: {', '.join(e['failed'])})" if e["failed"] else ""
        terminalreporter.write_line(f"criterion {n} [{status}] {e['title']}: {e['tests']} tests{extra}")


@pytest.fixture(scope="session")
def synth_records_small():
    return ingestion.synth_dataset(30, 16, seed=3)


@pytest.fixture(scope="session")
def processed_small(synth_records_small):
    return pipeline.prepare_dataset(synth_records_small, grid_size=16, seed=0)
