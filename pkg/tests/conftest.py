import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from deepela import tensor as F

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def float64_default():
    F.set_default_dtype(np.float64)
    yield
    F.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion implemented by the test")
    config.stash[_RESULTS] = {}


_RESULTS = pytest.StashKey[dict]()


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None and (rep.when == "call" or rep.failed or rep.skipped):
        n = mark.args[0]
        outcome = "PASS" if rep.passed and rep.when == "call" else "FAIL"
        if rep.skipped:
            outcome = "SKIP"
        results = item.config.stash[_RESULTS].setdefault(n, {})
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if rep.when == "call" or outcome != "PASS":
            results[item.name] = (outcome, detail)
    return rep


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        checks = results[n]
        ok = all(o == "PASS" for o, _ in checks.values())
        status = "PASS" if ok else ("SKIP" if all(o == "SKIP" for o, _ in checks.values()) else "FAIL")
        details = " | ".join(f"{name}: {d}" if d else name for name, (o, d) in checks.items())
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {details}")
