import os
import signal
import time

import pytest

from conftest import tagged_processes
from portjob.local import LocalExecutor
from portjob.model import JobSpec, JobState, ResourceSpec

S = JobState


@pytest.fixture
def local():
    executor = LocalExecutor(grace_period=1.0)
    yield executor
    executor.close()


def sh(script, env=None, **kw):
    return JobSpec('/bin/sh', ['-c', script], environment=env or {}, **kw)


def test_true_completes(local):
    job = local.submit(JobSpec('/bin/true'))
    status = local.wait(job, timeout=10)
    assert status.state is S.COMPLETED and status.exit_code == 0
    assert job.states() == [S.NEW, S.QUEUED, S.ACTIVE, S.COMPLETED]
    assert job.native_id.isdigit()


def test_false_fails_with_code(local):
    job = local.submit(JobSpec('/bin/false'))
    status = local.wait(job, timeout=10)
    assert (status.state, status.exit_code) == (S.FAILED, 1)


@pytest.mark.parametrize('code', [2, 77, 128, 255])
def test_exit_code_roundtrip(local, code):
    job = local.submit(sh(f'exit {code}'))
    assert local.wait(job, timeout=10).exit_code == code


def test_signal_death_is_failed_with_shell_code(local):
    job = local.submit(sh('kill -9 $$'))
    status = local.wait(job, timeout=10)
    assert status.state is S.FAILED
    assert status.exit_code == 128 + signal.SIGKILL
    assert 'SIGKILL' in status.message


def test_missing_executable_fails_at_spawn(local):
    job = local.submit(JobSpec('/no/such/program'))
    status = local.wait(job, timeout=5)
    assert status.state is S.FAILED and 'spawn failed' in status.message
    assert job.states() == [S.NEW, S.QUEUED, S.FAILED]


def test_cancel_sleep(local, tag_env):
    job = local.submit(JobSpec('/bin/sleep', ['60'], environment=tag_env))
    local.wait(job, until={S.ACTIVE}, timeout=5)
    t0 = time.monotonic()
    local.cancel(job)
    status = local.wait(job, timeout=5)
    assert status.state is S.CANCELED
    assert time.monotonic() - t0 < 1.0


def test_cancel_escalates_when_sigterm_is_ignored(local, tag_env):
    job = local.submit(sh("trap '' TERM; sleep 60 & wait; sleep 60", env=tag_env))
    local.wait(job, until={S.ACTIVE}, timeout=5)
    time.sleep(0.2)  # let the shell install its trap
    t0 = time.monotonic()
    local.cancel(job)
    status = local.wait(job, timeout=10)
    elapsed = time.monotonic() - t0
    assert status.state is S.CANCELED
    assert 0.9 <= elapsed < 2.0
    time.sleep(0.1)
    assert tagged_processes() == []


def test_cancel_kills_whole_process_group(local, tag_env):
    job = local.submit(sh('sleep 60 & sleep 60 & wait', env=tag_env))
    local.wait(job, until={S.ACTIVE}, timeout=5)
    time.sleep(0.1)
    assert len(tagged_processes()) >= 2
    local.cancel(job)
    local.wait(job, timeout=5)
    time.sleep(0.1)
    assert tagged_processes() == []


def test_cancel_after_exit_keeps_exit_status(local):
    job = local.submit(JobSpec('/bin/true'))
    local.wait(job, timeout=5)
    local.cancel(job)
    assert job.state is S.COMPLETED


def test_output_redirection(local, tmp_path):
    out = tmp_path / 'out.txt'
    err = tmp_path / 'err.txt'
    job = local.submit(sh('echo hello; echo oops >&2', stdout_path=str(out), stderr_path=str(err)))
    local.wait(job, timeout=5)
    assert out.read_text() == 'hello\n'
    assert err.read_text() == 'oops\n'


def test_shared_stdout_and_stderr(local, tmp_path):
    out = tmp_path / 'both.txt'
    job = local.submit(sh('echo a; echo b >&2; echo c', stdout_path=str(out), stderr_path=str(out)))
    local.wait(job, timeout=5)
    assert out.read_text() == 'a\nb\nc\n'


def test_stdin_directory_and_environment(local, tmp_path):
    (tmp_path / 'in.txt').write_text('payload\n')
    out = tmp_path / 'out.txt'
    job = local.submit(sh('cat; pwd; echo $GREETING', env={'GREETING': 'hi'},
                          directory=str(tmp_path), stdin_path=str(tmp_path / 'in.txt'),
                          stdout_path=str(out)))
    local.wait(job, timeout=5)
    assert out.read_text() == f'payload\n{tmp_path}\nhi\n'


def test_environment_is_not_inherited(local, tmp_path, monkeypatch):
    monkeypatch.setenv('PORTJOB_SECRET_TEST', 'leak')
    out = tmp_path / 'out.txt'
    job = local.submit(sh('echo "[$PORTJOB_SECRET_TEST]"', stdout_path=str(out)))
    local.wait(job, timeout=5)
    assert out.read_text() == '[]\n'


def test_multiple_launcher_ranks(local, tmp_path):
    spec = sh(f'echo $PORTJOB_RANK/$PORTJOB_NPROCS > {tmp_path}/r$PORTJOB_RANK',
              resources=ResourceSpec(node_count=3, processes_per_node=2), launcher='multiple')
    job = local.submit(spec)
    assert local.wait(job, timeout=5).state is S.COMPLETED
    # node_count collapses to one node: processes_per_node copies
    assert sorted(p.name for p in tmp_path.iterdir()) == ['r0', 'r1']
    assert (tmp_path / 'r1').read_text() == '1/2\n'


def test_multiple_launcher_first_failure_wins(local):
    spec = sh('if [ "$PORTJOB_RANK" = 1 ]; then exit 9; fi; sleep 30',
              resources=ResourceSpec(processes_per_node=3), launcher='multiple')
    job = local.submit(spec)
    status = local.wait(job, timeout=10)
    assert (status.state, status.exit_code) == (S.FAILED, 9)


def test_mpi_like_through_shim(local, tmp_path):
    spec = sh(f'echo $PORTJOB_RANK >> {tmp_path}/ranks',
              resources=ResourceSpec(processes_per_node=4), launcher='mpi_like')
    job = local.submit(spec)
    assert local.wait(job, timeout=10).state is S.COMPLETED
    assert sorted((tmp_path / 'ranks').read_text().split()) == ['0', '1', '2', '3']


def test_mpi_like_propagates_failure(local):
    spec = sh('[ "$PORTJOB_RANK" = 2 ] && exit 5; exit 0',
              resources=ResourceSpec(processes_per_node=3), launcher='mpi_like')
    job = local.submit(spec)
    status = local.wait(job, timeout=10)
    assert (status.state, status.exit_code) == (S.FAILED, 5)


def test_many_concurrent_jobs(local):
    jobs = [local.submit(sh(f'exit {i % 3}')) for i in range(60)]
    for i, job in enumerate(jobs):
        status = local.wait(job, timeout=20)
        assert status.exit_code == i % 3
        assert (status.state is S.COMPLETED) == (i % 3 == 0)
    assert local.live_processes() == 0


def test_close_kills_running_jobs(tag_env):
    executor = LocalExecutor(grace_period=1.0)
    executor.submit(JobSpec('/bin/sleep', ['60'], environment=tag_env))
    time.sleep(0.1)
    executor.close()
    time.sleep(0.1)
    assert tagged_processes() == []


def test_native_id_is_process_group(local, tag_env):
    job = local.submit(JobSpec('/bin/sleep', ['60'], environment=tag_env))
    local.wait(job, until={S.ACTIVE}, timeout=5)
    assert os.getpgid(int(job.native_id)) == int(job.native_id)
    local.cancel(job)
    local.wait(job, timeout=5)
