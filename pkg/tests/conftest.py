import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path_factory, monkeypatch):
    # keep tests from touching a user cache unless a suite opts in
    if "INSTPIFU_CACHE" not in os.environ:
        monkeypatch.setenv("INSTPIFU_CACHE", str(tmp_path_factory.getbasetemp() / "cache"))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None) and not terminalreporter.stats:
        return
    lines = {int(s.split(":")[0].split()[1]): s for s in mod.RESULTS}
    ran = {int(r.nodeid.split("test_c")[1][:2]) for k in ("passed", "failed", "error")
           for r in terminalreporter.stats.get(k, []) if "test_acceptance.py::test_c" in r.nodeid}
    if not ran:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ran):
        terminalreporter.write_line(lines.get(n, f"criterion {n:2d}: FAIL  (did not complete)"))
