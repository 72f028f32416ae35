import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion checked by the test")
    config._criteria = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    results = item.config._criteria
    number, text = mark.args
    if call.when == "setup" and call.excinfo is not None and call.excinfo.errisinstance(pytest.skip.Exception):
        results[number] = ("SKIP", text, str(call.excinfo.value))
    elif call.when == "call":
        if call.excinfo is None:
            results[number] = ("PASS", text, "")
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            results[number] = ("SKIP", text, str(call.excinfo.value))
        else:
            results[number] = ("FAIL", text, call.excinfo.typename)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config._criteria
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, text, note = results[number]
        line = f"criterion {number:>2}: {status:<4} {text}"
        terminalreporter.write_line(line + (f" ({note})" if note else ""))
