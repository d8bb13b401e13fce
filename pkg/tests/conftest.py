import os
import subprocess
import uuid
from collections import OrderedDict
from pathlib import Path

import psutil
import pytest

_criteria: "OrderedDict[str, list]" = OrderedDict()

TAG_VAR = 'PORTJOB_TEST_TAG'
SESSION_TAG = uuid.uuid4().hex


def pytest_runtest_logreport(report):
    name = getattr(report, 'criterion', None)
    if name is None:
        return
    if report.when == 'call' or report.failed:
        _criteria.setdefault(name, []).append(report.passed or report.skipped)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker('criterion')
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section('acceptance criteria')
    for name, results in _criteria.items():
        verdict = 'PASS' if all(results) else 'FAIL'
        terminalreporter.write_line(f'{verdict}  {name}')


def tagged_processes(tag: str = SESSION_TAG):
    """Live processes started by this test session (found by their environment tag)."""
    found = []
    for proc in psutil.process_iter(['pid']):
        try:
            if proc.environ().get(TAG_VAR) == tag and proc.status() != psutil.STATUS_ZOMBIE:
                found.append(proc)
        except (psutil.NoSuchProcess, psutil.AccessDenied, psutil.ZombieProcess):
            continue
    return found


@pytest.fixture
def tag_env():
    """Environment entries that mark a spec's processes as belonging to this session."""
    return {TAG_VAR: SESSION_TAG}


@pytest.fixture
def simsched(tmp_path, monkeypatch):
    """A fresh real-time simulated cluster; every job is killed at teardown."""
    directory = tmp_path / 'sim'

    def init(nodes=16, *extra):
        subprocess.run(['ssim', '--dir', str(directory), 'init', '--nodes', str(nodes), *extra],
                       check=True)
        return directory

    monkeypatch.setenv('SIMSCHED_DIR', str(directory))
    init()
    yield init
    subprocess.run(['ssim', '--dir', str(directory), 'shutdown'], capture_output=True)


@pytest.fixture
def workdir(tmp_path) -> Path:
    path = tmp_path / 'work'
    path.mkdir()
    return path


@pytest.fixture(autouse=True)
def _isolated_state(tmp_path, monkeypatch):
    monkeypatch.setenv('PORTJOB_DIR', str(tmp_path / 'portjob-state'))
    monkeypatch.delenv('PORTJOB_PILOT_DIR', raising=False)
    yield


def pytest_sessionfinish(session, exitstatus):
    leftovers = tagged_processes()
    for proc in leftovers:
        try:
            os.killpg(proc.pid, 9)
        except OSError:
            pass
