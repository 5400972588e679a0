import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "gradient oracle",
    2: "closed-form oracles",
    3: "metric oracle suite",
    4: "desk classifier F1",
    5: "desk explanation quality",
    6: "distribution-shift direction",
    7: "faithfulness direction",
    8: "signaling regression",
    9: "frozen black box",
    10: "end-to-end determinism",
}

_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")


def pytest_runtest_logreport(report):
    n = report.user_properties and dict(report.user_properties).get("criterion")
    if not n:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(n, []).append(report.outcome == "passed")


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark:
        item.user_properties.append(("criterion", mark.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in _outcomes:
            status = "PASS" if all(_outcomes[n]) else "FAIL"
            terminalreporter.write_line(f"criterion {n:2d} {name:30s} {status}")
