from __future__ import annotations

import sys
from pathlib import Path

from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    # one verdict per acceptance criterion, failing if any phase fails
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    num = int(name.split("_")[2])
    title = " ".join(name.split("_")[3:])
    prev = _CRITERIA.get(num, (title, "PASS"))[1]
    if report.failed or prev == "FAIL":
        _CRITERIA[num] = (title, "FAIL")
    elif report.when == "call":
        _CRITERIA[num] = (title, "SKIP" if report.skipped else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, verdict = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d} {verdict}: {title}")
