import numpy as np
import pytest

from semiseq import _kernels

BACKENDS = ["numpy"] + (["numba"] if _kernels._NUMBA_IMPORTED else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run a test once per available kernel implementation."""
    prev = _kernels.set_backend(request.param)
    yield request.param
    _kernels.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}
N_CRITERIA = 11


@pytest.fixture
def acceptance():
    """Record one verdict per acceptance criterion for the end-of-run summary."""
    def record(number, ok, detail):
        _ACCEPTANCE[number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in _ACCEPTANCE:
            ok, detail = _ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL  (no verdict recorded: test errored or was not run)")
