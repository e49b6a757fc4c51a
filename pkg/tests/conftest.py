from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from avstore.archive import Archiver  # noqa: E402
from avstore.core import EngineConfig  # noqa: E402
from avstore.hotstore import HotStore  # noqa: E402

_CRITERIA: dict[int, dict] = {}


@pytest.fixture
def cfg(tmp_path) -> EngineConfig:
    return EngineConfig(hot_root=tmp_path / "hot", cold_root=tmp_path / "cold")


@pytest.fixture
def hot(cfg):
    store = HotStore(cfg.hot_root, cfg)
    yield store
    store.close()


@pytest.fixture
def archiver(hot, cfg):
    arch = Archiver(hot, cfg.cold_root, cfg)
    yield arch
    arch.close()


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": 0, "failed": 0})
    if report.failed:
        entry["failed"] += 1
    elif report.when == "call" and report.passed:
        entry["passed"] += 1


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        ok = e["failed"] == 0 and e["passed"] > 0
        terminalreporter.write_line(
            f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {e['title']}"
            f"  ({e['passed']} passed, {e['failed']} failed)"
        )
