import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("visco", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("visco")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def check_run(tmp_path_factory):
    """One full ``visco check`` shared by the acceptance tests."""
    import json
    from visco.cli import main
    out = tmp_path_factory.mktemp("check_a")
    code = main(["-q", "check", "--out", str(out), "--seed", "0"])
    with open(os.path.join(out, "check_report.json")) as fh:
        report = json.load(fh)
    return {"exit": code, "out": str(out), "report": report}


_ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(n, ok, detail)``; asserts ``ok``."""
    def record(n, ok, detail):
        _ACCEPTANCE[n] = (bool(ok), detail)
        assert ok, f"criterion {n}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
