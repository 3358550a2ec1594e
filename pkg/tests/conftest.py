import os
import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_collection_modifyitems(config, items):
    if os.environ.get("MGPDE_NIGHTLY") == "1":
        return
    skip = pytest.mark.skip(reason="nightly benchmark; set MGPDE_NIGHTLY=1")
    for item in items:
        if "nightly" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x: np.ndarray, h: float = 1e-6, index=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (all entries, or the given flat indices)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


_CRITERIA: dict[str, str] = {}


def pytest_runtest_logreport(report):
    for key, value in getattr(report, "user_properties", []):
        if key == "criterion":
            _CRITERIA[value.split(":")[0]] = value
    m = re.search(r"test_criterion_(\d+)_", report.nodeid)
    if m and report.skipped and not hasattr(report, "wasxfail"):
        name = f"criterion {m.group(1)}"
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
        _CRITERIA.setdefault(name, f"{name}: SKIP - {reason.removeprefix('Skipped: ')}")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(_CRITERIA[k])


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail[, known_gap])`` records and prints one PASS/FAIL line, then asserts."""

    def record(n: int, ok: bool, detail: str, known_gap: str | None = None):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        request.node.user_properties.append(("criterion", line))
        print(line)
        if not ok and known_gap:
            # reported as xfailed: the verdict above still reads FAIL
            pytest.xfail(f"{line} ({known_gap})")
        assert ok, line

    return record
