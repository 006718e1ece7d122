"""Shared fixtures and the acceptance summary printer."""

from __future__ import annotations

import numpy as np
import pytest

from polqkd.config import Config

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    if report.when not in ("setup", "call"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    n = props["criterion"]
    entry = _CRITERIA.setdefault(n, {"title": props.get("title", ""), "outcome": "passed", "detail": "", "duration": 0.0})
    entry["duration"] += report.duration
    if props.get("detail"):
        entry["detail"] = props["detail"]
    if report.failed:
        entry["outcome"] = "failed"
    elif report.skipped and entry["outcome"] == "passed":
        entry["outcome"] = "skipped"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[e["outcome"]]
        line = f"criterion {n} {status}  {e['title']}  ({e['duration']:.1f} s)"
        if e["detail"]:
            line += f"  {e['detail']}"
        tr.write_line(line)


@pytest.fixture(autouse=True)
def _criterion_props(request):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        request.node.user_properties.append(("criterion", marker.args[0]))
        request.node.user_properties.append(("title", marker.args[1]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def test_cfg():
    """Test-scale blocks at 50 km."""
    return Config().replace(fiber_length=50.0, n_z_pa=819_200)


@pytest.fixture
def small_cfg():
    """Tiny blocks for fast end-to-end sessions."""
    return Config().replace(fiber_length=25.0, n_z_ec=1024, n_z_pa=8192)
