import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default",
    max_examples=100,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_criteria: dict[int, list[tuple[str, str, float]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when != "call" and not (rep.when != "call" and rep.failed):
        return
    status = "PASS" if rep.passed else "FAIL"
    for marker in item.iter_markers("criterion"):
        _criteria.setdefault(marker.args[0], []).append((status, item.name, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        runs = _criteria[n]
        status = "FAIL" if any(s == "FAIL" for s, _, _ in runs) else "PASS"
        names = ", ".join(dict.fromkeys(name.split("[")[0] for _, name, _ in runs))
        duration = sum(d for _, _, d in runs)
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {names}  ({duration:.2f}s)")
