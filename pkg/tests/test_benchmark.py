import subprocess
import sys
from pathlib import Path

import pytest

from brainmarkers import _accel

BENCH = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"


@pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")
def test_benchmark_quick_backends_agree():
    out = subprocess.run([sys.executable, str(BENCH), "--quick", "--repeat", "1"],
                         capture_output=True, text=True, check=True).stdout
    rows = out.strip().splitlines()[1:]
    assert len(rows) == 4
    assert all(r.endswith("agree") for r in rows), out
