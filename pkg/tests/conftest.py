import pytest

_acceptance_results: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    if report.when == "call":
        _acceptance_results.append((report.nodeid, "PASS" if report.passed else "FAIL"))
    elif report.when == "setup" and report.skipped:
        _acceptance_results.append((report.nodeid, "SKIP"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in sorted(_acceptance_results):
        name = nodeid.split("::")[-1]
        terminalreporter.write_line(f"[{outcome}] {name}")
