import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def unit(rng, d, size=()):
    size = (size,) if np.isscalar(size) else tuple(size)
    x = rng.standard_normal(size + (d,))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_tangent(rng, p, scale=1.0):
    v = rng.standard_normal(p.shape)
    v -= np.sum(v * p, axis=-1, keepdims=True) * p
    return scale * v


# one summary line per acceptance criterion, printed after the run
_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if not name.startswith("test_criterion_"):
        return
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        prev = _CRITERIA.get(name)
        _CRITERIA[name] = "FAIL" if failed or prev == "FAIL" else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        number, label = name.split("_", 3)[2], name.split("_", 3)[3].replace("_", " ")
        terminalreporter.write_line(f"{_CRITERIA[name]}  criterion {number:>2}: {label}")
