import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from brainmarkers import _accel  # noqa: E402

BACKENDS = ["numba", "numpy"] if _accel.HAVE_NUMBA else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run a test once per kernel backend."""
    monkeypatch.setenv(_accel.ENV_FLAG, "1" if request.param == "numba" else "0")
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        title, ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n} [{title}]: {'PASS' if ok else 'FAIL'} ({detail})")
