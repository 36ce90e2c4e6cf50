import numpy as np
import pytest

from ibrsafe.model import DEFAULT_PARAMS, build_matrices


@pytest.fixture
def params():
    return DEFAULT_PARAMS


@pytest.fixture
def mats():
    return build_matrices(DEFAULT_PARAMS)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def unit_gain(mats, target=-1.0):
    """Gain with A - BK = target * I."""
    return np.linalg.solve(mats.b_mat, mats.a_mat - target * np.eye(2))


# --------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    n, title = mark.args
    failed = call.excinfo is not None
    why = ""
    if failed:
        why = str(call.excinfo.value).strip().splitlines()[0] if str(call.excinfo.value).strip() else call.excinfo.typename
    _ACCEPTANCE[n] = (title, not failed, why)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, why = _ACCEPTANCE[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}"
        if not ok:
            line += f"  [{why[:200]}]"
        tr.write_line(line)
