import json
import os
import subprocess
import sys
import time
from importlib import resources

import pytest

from portjob.model import JobState, path_to, transition_allowed

S = JobState


def portjob(*argv, timeout=120, **kw):
    return subprocess.run([sys.executable, '-m', 'portjob.cli', *map(str, argv)],
                          capture_output=True, text=True, timeout=timeout, **kw)


def write_spec(path, executable, *args, **fields):
    doc = {'executable': executable, 'arguments': list(args), **fields}
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def specs(tmp_path, tag_env):
    d = tmp_path / 'specs'
    d.mkdir()
    return {
        'true': write_spec(d / 'true.json', '/bin/true'),
        'false': write_spec(d / 'false.json', '/bin/false'),
        'sleep': write_spec(d / 'sleep.json', '/bin/sleep', '60', environment=tag_env,
                            attributes={'wall_time_s': 120}),
        'batch_true': write_spec(d / 'btrue.json', '/bin/true', attributes={'wall_time_s': 60}),
        'bad': d / 'bad.json',
    }


@pytest.fixture
def fast_dialect(tmp_path):
    doc = json.loads(resources.files('portjob.batch').joinpath('dialects/simsched.json').read_text())
    doc['poll_interval'] = 0.2
    path = tmp_path / 'fast-simsched.json'
    path.write_text(json.dumps(doc))
    return path


def last_state(out):
    return out.strip().splitlines()[-1].split('state=')[-1]


def test_run_wait_true(specs):
    r = portjob('run', specs['true'], '--backend', 'local', '--wait')
    assert r.returncode == 0
    assert last_state(r.stdout) == 'COMPLETED'
    first = r.stdout.splitlines()[0]
    assert first.startswith('id=') and ' native=' in first and first.endswith('state=NEW')


def test_run_wait_false(specs):
    r = portjob('run', specs['false'], '--wait')
    assert r.returncode == 3 and last_state(r.stdout) == 'FAILED'


def test_malformed_spec_exits_2(specs):
    specs['bad'].write_text('{"executable": ')
    r = portjob('run', specs['bad'], '--wait')
    assert r.returncode == 2 and r.stderr and not r.stdout


def test_invalid_spec_exits_2(specs, tmp_path):
    path = write_spec(tmp_path / 'inv.json', '')
    r = portjob('run', path, '--wait')
    assert r.returncode == 2 and 'executable' in r.stderr


def test_unknown_backend_exits_2(specs):
    r = portjob('run', specs['true'], '--backend', 'nope')
    assert r.returncode == 2


def test_bad_flags_exit_2():
    assert portjob('run').returncode == 2
    assert portjob('frobnicate').returncode == 2


def test_structured_output_replays_to_legal_history(specs):
    r = portjob('run', specs['false'], '--wait', '--output', 'structured')
    records = [json.loads(line) for line in r.stdout.splitlines()]
    assert {tuple(sorted(rec)) for rec in records} == {('exit', 'id', 'state', 'ts')}
    states = [S(rec['state']) for rec in records]
    assert states[0] is S.NEW and states[-1] is S.FAILED
    assert all(transition_allowed(a, b) for a, b in zip(states, states[1:]))
    assert records[-1]['exit'] == 1 and len({rec['id'] for rec in records}) == 1


def test_status_after_run(specs):
    r = portjob('run', specs['true'], '--wait')
    job_id = r.stdout.split()[0].split('=')[1]
    status = portjob('status', job_id)
    assert status.returncode == 0
    assert status.stdout == f'{job_id} COMPLETED exit=0\n'


def test_status_unknown_id():
    r = portjob('status', 'no-such-job')
    assert r.returncode == 5 and r.stderr


def test_cancel_unknown_id():
    assert portjob('cancel', 'no-such-job').returncode == 5


def test_detached_local_run_and_cancel(specs):
    from conftest import tagged_processes

    r = portjob('run', specs['sleep'], '--backend', 'local')
    assert r.returncode == 0
    job_id = r.stdout.split()[0].split('=')[1]
    deadline = time.monotonic() + 10
    while portjob('status', job_id).stdout.split()[1] != 'ACTIVE':
        assert time.monotonic() < deadline
        time.sleep(0.1)
    assert portjob('cancel', job_id).returncode == 0
    deadline = time.monotonic() + 10
    while (state := portjob('status', job_id).stdout.split()[1]) == 'ACTIVE':
        assert time.monotonic() < deadline
        time.sleep(0.1)
    assert state == 'CANCELED'
    time.sleep(0.2)
    assert tagged_processes() == []


def test_batch_run_wait(simsched, specs, fast_dialect):
    r = portjob('run', specs['batch_true'], '--backend', 'batch', '--dialect', fast_dialect,
                '--wait')
    assert r.returncode == 0 and last_state(r.stdout) == 'COMPLETED'
    states = [line.split('state=')[1] for line in r.stdout.splitlines()]
    assert states == ['NEW', 'QUEUED', 'ACTIVE', 'COMPLETED']


def test_cancel_queued_batch_job(simsched, specs, fast_dialect, tmp_path):
    simsched(1)
    blocker = write_spec(tmp_path / 'block.json', '/bin/sleep', '30',
                         attributes={'wall_time_s': 60})
    first = portjob('run', blocker, '--backend', 'batch', '--dialect', fast_dialect)
    second = portjob('run', blocker, '--backend', 'batch', '--dialect', fast_dialect)
    job_id = second.stdout.split()[0].split('=')[1]
    assert portjob('status', job_id).stdout.split()[1] == 'QUEUED'
    assert portjob('cancel', job_id).returncode == 0
    assert portjob('status', job_id).stdout == f'{job_id} CANCELED\n'
    portjob('cancel', first.stdout.split()[0].split('=')[1])


def test_exit_codes_independent_of_backend(simsched, specs, fast_dialect, tmp_path):
    fail = write_spec(tmp_path / 'f.json', '/bin/false', attributes={'wall_time_s': 60})
    local = portjob('run', fail, '--backend', 'local', '--wait')
    batch = portjob('run', fail, '--backend', 'batch', '--dialect', fast_dialect, '--wait')
    assert local.returncode == batch.returncode == 3


def test_sim_subcommand_passthrough(simsched):
    r = portjob('sim', 'show')
    assert r.returncode == 0 and json.loads(r.stdout)['total_nodes'] == 16


# -- pilot ---------------------------------------------------------------------

@pytest.fixture
def pilot_env(tmp_path, monkeypatch):
    d = tmp_path / 'pilot'
    monkeypatch.setenv('PORTJOB_PILOT_DIR', str(d))
    yield d
    if (d / 'pilot.json').exists():
        portjob('pilot', 'drain')


def alloc_spec(tmp_path, nodes):
    return write_spec(tmp_path / 'alloc.json', '/bin/sleep', '600', launcher='multiple',
                      resources={'node_count': nodes}, attributes={'wall_time_s': 600})


def test_pilot_via_batch_end_to_end(simsched, pilot_env, tmp_path, fast_dialect):
    r = portjob('pilot', 'start', '--alloc', alloc_spec(tmp_path, 4), '--via', 'batch',
                '--dialect', fast_dialect, '--cores-per-node', 2)
    assert r.returncode == 0, r.stderr
    assert r.stdout.strip().startswith('pilot-')
    tasks = []
    for i in range(100):
        tasks.append(write_spec(tmp_path / f't{i}.json', '/bin/true'))
    r = portjob('pilot', 'submit', *tasks)
    assert r.returncode == 0, r.stderr
    lines = r.stdout.splitlines()
    assert len(lines) == 100 and all(line.endswith('state=COMPLETED') for line in lines)
    assert portjob('pilot', 'drain').returncode == 0
    assert not (pilot_env / 'pilot.json').exists()


def test_pilot_split_prints_pools(simsched, pilot_env, tmp_path, fast_dialect):
    portjob('pilot', 'start', '--alloc', alloc_spec(tmp_path, 8), '--via', 'batch',
            '--dialect', fast_dialect, '--cores-per-node', 1, check=True)
    r = portjob('pilot', 'split', '--children', 2)
    assert r.returncode == 0
    pools = [line.split('nodes=')[1] for line in r.stdout.splitlines()]
    assert pools == ['0,1,2,3', '4,5,6,7']
    t = write_spec(tmp_path / 't.json', '/bin/sh', '-c', 'echo $PORTJOB_NODE',
                   stdout_path=str(tmp_path / 'node.txt'))
    assert portjob('pilot', 'submit', t).returncode == 0
    assert (tmp_path / 'node.txt').read_text() == '0\n'


def test_pilot_oversized_task(simsched, pilot_env, tmp_path, fast_dialect):
    portjob('pilot', 'start', '--alloc', alloc_spec(tmp_path, 2), '--via', 'batch',
            '--dialect', fast_dialect, '--cores-per-node', 1, check=True)
    big = write_spec(tmp_path / 'big.json', '/bin/true', launcher='multiple',
                     resources={'node_count': 3})
    ok = write_spec(tmp_path / 'ok.json', '/bin/true')
    r = portjob('pilot', 'submit', big, ok)
    assert r.returncode == 3
    states = sorted(line.split('state=')[1] for line in r.stdout.splitlines())
    assert states == ['COMPLETED', 'FAILED']
    assert portjob('pilot', 'drain').returncode == 0


def test_pilot_via_local(pilot_env, tmp_path):
    alloc = write_spec(tmp_path / 'a.json', '/bin/sleep', '600')
    assert portjob('pilot', 'start', '--alloc', alloc, '--cores-per-node', 2).returncode == 0
    tasks = [write_spec(tmp_path / f't{i}.json', '/bin/true') for i in range(5)]
    r = portjob('pilot', 'submit', *tasks)
    assert r.returncode == 0 and len(r.stdout.splitlines()) == 5
    assert portjob('pilot', 'drain').returncode == 0


def test_pilot_without_started_pilot(pilot_env, tmp_path):
    t = write_spec(tmp_path / 't.json', '/bin/true')
    r = portjob('pilot', 'submit', t)
    assert r.returncode == 2 and r.stderr


def test_pilot_dir_flag(tmp_path, monkeypatch):
    monkeypatch.delenv('PORTJOB_PILOT_DIR', raising=False)
    d = tmp_path / 'explicit'
    alloc = write_spec(tmp_path / 'a.json', '/bin/sleep', '600')
    assert portjob('pilot', '--dir', d, 'start', '--alloc', alloc).returncode == 0
    assert (d / 'pilot.json').exists()
    assert portjob('pilot', '--dir', d, 'drain').returncode == 0


def test_replayed_structured_lines_match_library_history(specs):
    r = portjob('run', specs['true'], '--wait', '--output', 'structured')
    states = [S(json.loads(line)['state']) for line in r.stdout.splitlines()]
    assert states == [S.NEW] + path_to(S.NEW, S.COMPLETED, has_exit_code=True)


def test_state_directory_location(specs, tmp_path):
    r = portjob('run', specs['true'], '--wait')
    job_id = r.stdout.split()[0].split('=')[1]
    assert (tmp_path / 'portjob-state' / 'jobs' / f'{job_id}.json').exists()
    other = tmp_path / 'elsewhere'
    assert portjob('status', job_id, '--state-dir', other).returncode == 5
    env = dict(os.environ, PORTJOB_DIR=str(other))
    assert portjob('status', job_id, env=env).returncode == 5
