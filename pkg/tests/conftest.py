import re

import pytest

_ACCEPTANCE_RESULTS: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    match = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not match:
        return
    key = f"criterion {int(match.group(1))}"
    if report.when == "call":
        _ACCEPTANCE_RESULTS[key] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and report.skipped:
        _ACCEPTANCE_RESULTS[key] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for key in sorted(_ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[-1])):
        terminalreporter.write_line(f"{key}: {_ACCEPTANCE_RESULTS[key]}")


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)
