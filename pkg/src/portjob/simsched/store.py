"""File-backed simulated cluster driven by short-lived command invocations.

There is no daemon. Every command takes the state-directory lock, brings the
cluster up to date (collects finished workloads, enforces walltimes, starts
whatever the policy allows) and then does its own work. Job workloads are
real processes running the submitted script, detached from the command that
happened to start them.

Layout of a state directory::

    cluster.json      configuration, clock, id counter, active job ids
    jobs/<id>.json    one record per job
    jobs/<id>.result  "<exit code> <wall end time>", written by the workload wrapper
    lock              flock target serializing all commands
"""
from __future__ import annotations

import contextlib
import fcntl
import json
import os
import shlex
import signal
import subprocess
import time
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple

from portjob.simsched.engine import (DONE, FAIL, FINAL_TOKENS, KILL, PEND, RUN, UNKNOWN,
                                     SimCluster, SimJob, schedule_step)

DEFAULT_TIMESCALE = 0.05
DIRECTIVE = '#SSUB'

# variables a workload inherits from the submitting environment; the submit
# script is expected to export anything else it needs
INHERITED_ENV = ('PATH', 'HOME', 'USER', 'LOGNAME', 'LANG', 'LC_ALL', 'LC_CTYPE', 'TMPDIR',
                 'SHELL', 'PYTHONPATH', 'SIMSCHED_DIR')


class SimschedError(Exception):
    pass


def _atomic_write(path: Path, data: Any) -> None:
    tmp = path.with_name(f'.{path.name}.{os.getpid()}.tmp')
    tmp.write_text(json.dumps(data, indent=1, sort_keys=True))
    os.replace(tmp, path)


def parse_directives(text: str) -> Dict[str, Any]:
    """Read ``#SSUB -N n``, ``#SSUB -t seconds`` and ``#SSUB -q name`` lines."""
    found: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.startswith(DIRECTIVE):
            continue
        try:
            words = shlex.split(line[len(DIRECTIVE):])
        except ValueError as e:
            raise SimschedError(f'line {lineno}: malformed directive: {e}') from None
        if len(words) != 2:
            raise SimschedError(f'line {lineno}: expected "{DIRECTIVE} -<flag> <value>"')
        flag, value = words
        try:
            if flag == '-N':
                found['nodes'] = int(value)
                if found['nodes'] < 1:
                    raise ValueError
            elif flag == '-t':
                found['walltime'] = float(value)
                if found['walltime'] <= 0:
                    raise ValueError
            elif flag == '-q':
                found['queue'] = value
            else:
                raise SimschedError(f'line {lineno}: unknown directive flag {flag!r}')
        except ValueError:
            raise SimschedError(f'line {lineno}: bad value {value!r} for {flag}') from None
    return found


def _inherited(env: Mapping[str, str]) -> Dict[str, str]:
    return {k: v for k, v in env.items() if k in INHERITED_ENV or k.startswith('PORTJOB_')}


def _interpreter(text: str) -> List[str]:
    first = text.splitlines()[0] if text else ''
    if first.startswith('#!'):
        parts = shlex.split(first[2:].strip())
        if parts:
            return parts
    return ['/bin/sh']


def _group_alive(pgid: Optional[int]) -> bool:
    if not pgid:
        return False
    try:
        os.killpg(pgid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _kill_group(pgid: Optional[int]) -> None:
    if not pgid:
        return
    try:
        os.killpg(pgid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass


class SimState:
    """One simulated cluster persisted under ``path``."""

    def __init__(self, path: os.PathLike | str) -> None:
        self.path = Path(path)
        self.jobs_dir = self.path / 'jobs'
        self._cluster: Dict[str, Any] = {}

    @classmethod
    def from_env(cls, env: Optional[Mapping[str, str]] = None) -> 'SimState':
        env = os.environ if env is None else env
        path = env.get('SIMSCHED_DIR')
        if not path:
            raise SimschedError('SIMSCHED_DIR is not set')
        return cls(path)

    # -- setup and locking ------------------------------------------------------

    def init(self, nodes: int, *, node_cores: int = 1, backfill: bool = False,
             timescale: float = DEFAULT_TIMESCALE, stepped: bool = False) -> None:
        if nodes < 1 or node_cores < 1:
            raise SimschedError('need at least one node and one core per node')
        if timescale <= 0:
            raise SimschedError('timescale must be positive')
        self.jobs_dir.mkdir(parents=True, exist_ok=True)
        with self.locked(load=False):
            for stale in self.jobs_dir.iterdir():
                stale.unlink()
            self._cluster = {
                'total_nodes': nodes, 'node_cores': node_cores, 'backfill': backfill,
                'mode': 'stepped' if stepped else 'realtime', 'timescale': timescale,
                'epoch': time.time(), 'vnow': 0.0, 'next_id': 1, 'active': [],
            }
            self._save_cluster()

    @contextlib.contextmanager
    def locked(self, load: bool = True) -> Iterator['SimState']:
        if not self.path.is_dir():
            raise SimschedError(f'{self.path} is not an initialized simsched directory')
        with open(self.path / 'lock', 'a') as lock:
            fcntl.flock(lock, fcntl.LOCK_EX)
            try:
                if load:
                    self._load_cluster()
                yield self
            finally:
                fcntl.flock(lock, fcntl.LOCK_UN)

    def _load_cluster(self) -> None:
        try:
            self._cluster = json.loads((self.path / 'cluster.json').read_text())
        except FileNotFoundError:
            raise SimschedError(f'{self.path} is not initialized (run "ssim init")') from None

    def _save_cluster(self) -> None:
        _atomic_write(self.path / 'cluster.json', self._cluster)

    @property
    def config(self) -> Dict[str, Any]:
        return dict(self._cluster)

    # -- clock --------------------------------------------------------------------

    def now(self) -> float:
        c = self._cluster
        if c['mode'] == 'stepped':
            return float(c['vnow'])
        return (time.time() - c['epoch']) / c['timescale']

    def _virtual(self, wall: float) -> float:
        c = self._cluster
        if c['mode'] == 'stepped':
            return float(c['vnow'])
        return (wall - c['epoch']) / c['timescale']

    # -- records -------------------------------------------------------------------

    def _job_path(self, job_id: int) -> Path:
        return self.jobs_dir / f'{job_id}.json'

    def load_job(self, job_id: int) -> Optional[Dict[str, Any]]:
        try:
            return json.loads(self._job_path(job_id).read_text())
        except (FileNotFoundError, ValueError):
            return None

    def _save_job(self, job: Dict[str, Any]) -> None:
        _atomic_write(self._job_path(job['id']), job)

    def _read_result(self, job_id: int) -> Optional[Tuple[int, float]]:
        try:
            code, end = (self.jobs_dir / f'{job_id}.result').read_text().split()
            return int(code), float(end)
        except (FileNotFoundError, ValueError):
            return None

    # -- the scheduler ------------------------------------------------------------

    def catch_up(self) -> None:
        """Collect finished workloads, enforce walltimes, start what the policy allows."""
        now = self.now()
        active = [j for j in (self.load_job(i) for i in self._cluster['active']) if j]
        for job in active:
            if job['state'] == RUN:
                self._reap(job, now)
        still = [j for j in active if j['state'] not in FINAL_TOKENS]
        cluster = SimCluster(self._cluster['total_nodes'], self._cluster['node_cores'], now=now)
        sims = {}
        for job in still:
            sim = SimJob(job['id'], job['nodes'], job['walltime'], state=job['state'],
                         submit_time=job['submit_time'], start_time=job['start_time'])
            sims[job['id']] = job
            (cluster.running if job['state'] == RUN else cluster.pending).append(sim)
        for decision in schedule_step(cluster, self._cluster['backfill']):
            self._start(sims[decision.job_id], now)
        self._cluster['active'] = [j['id'] for j in still]
        self._save_cluster()

    def _reap(self, job: Dict[str, Any], now: float) -> None:
        result = self._read_result(job['id'])
        deadline = job['start_time'] + job['walltime']
        if result is not None:
            code, end_wall = result
            end = min(max(self._virtual(end_wall), job['start_time']), now)
            job.update(exit_code=code, end_time=end,
                       state=KILL if end > deadline else (DONE if code == 0 else FAIL))
        elif now >= deadline:
            _kill_group(job.get('pgid'))
            job.update(state=KILL, end_time=deadline)
        elif not _group_alive(job.get('pgid')):
            if self._read_result(job['id']) is not None:
                return self._reap(job, now)
            job.update(state=FAIL, end_time=now, exit_code=None)
        else:
            return
        self._save_job(job)

    def _start(self, job: Dict[str, Any], now: float) -> None:
        script = job['script']
        try:
            text = Path(script).read_text()
        except OSError:
            text = ''
        result = self.jobs_dir / f'{job["id"]}.result'
        tmp = self.jobs_dir / f'.{job["id"]}.result.tmp'
        out = Path(job['cwd']) / f'simsched-{job["id"]}.out'
        body = (f'{shlex.join(_interpreter(text) + [script])}; ec=$?; '
                f'printf "%s %s\\n" "$ec" "$(date +%s.%N)" > {shlex.quote(str(tmp))} && '
                f'mv {shlex.quote(str(tmp))} {shlex.quote(str(result))}')
        launcher = f'( {body} ) </dev/null >{shlex.quote(str(out))} 2>&1 & echo $!'
        env = dict(job.get('env') or {})
        env.update(SIMSCHED_JOB_ID=str(job['id']), SIMSCHED_NUM_NODES=str(job['nodes']))
        cwd = job['cwd'] if os.path.isdir(job['cwd']) else '/'
        # the outer shell exits at once; its process group outlives it and is what we kill
        outer = subprocess.Popen(['/bin/sh', '-c', launcher], cwd=cwd, env=env,
                                 stdin=subprocess.DEVNULL, stdout=subprocess.PIPE,
                                 stderr=subprocess.DEVNULL, start_new_session=True)
        outer.communicate()
        job.update(state=RUN, start_time=now, pgid=outer.pid)
        self._save_job(job)

    # -- commands --------------------------------------------------------------

    def submit(self, script: str, *, cwd: Optional[str] = None,
               env: Optional[Mapping[str, str]] = None) -> int:
        path = Path(script).resolve()
        try:
            text = path.read_text()
        except OSError as e:
            raise SimschedError(f'cannot read script {script}: {e}') from None
        directives = parse_directives(text)
        nodes = directives.get('nodes', 1)
        total = self._cluster['total_nodes']
        if nodes > total:
            raise SimschedError(f'job requests {nodes} nodes but the cluster size is '
                                f'{total} nodes')
        self.catch_up()
        job_id = self._cluster['next_id']
        self._cluster['next_id'] = job_id + 1
        job = {
            'id': job_id, 'nodes': nodes, 'walltime': directives.get('walltime', 3600.0),
            'queue': directives.get('queue'), 'script': str(path),
            'cwd': cwd or os.getcwd(), 'env': _inherited(os.environ if env is None else env),
            'submit_time': self.now(), 'start_time': None, 'end_time': None,
            'state': PEND, 'exit_code': None, 'pgid': None,
        }
        self._save_job(job)
        self._cluster['active'].append(job_id)
        self.catch_up()
        return job_id

    def status(self, ids: List[str]) -> List[Tuple[str, str]]:
        self.catch_up()
        if not ids:
            ids = [p.stem for p in sorted(self.jobs_dir.glob('*.json'), key=lambda p: int(p.stem))]
        out = []
        for raw in ids:
            job = self.load_job(int(raw)) if raw.isdigit() else None
            out.append((raw, job['state'] if job else UNKNOWN))
        return out

    def cancel(self, job_id: str) -> str:
        self.catch_up()
        job = self.load_job(int(job_id)) if job_id.isdigit() else None
        if job is None:
            raise SimschedError(f'unknown job id {job_id}')
        if job['state'] in FINAL_TOKENS:
            return job['state']
        if job['state'] == RUN:
            _kill_group(job.get('pgid'))
        job.update(state=KILL, end_time=self.now())
        self._save_job(job)
        self.catch_up()
        return KILL

    def stick(self, by: float = 1.0) -> float:
        if self._cluster['mode'] != 'stepped':
            raise SimschedError('stick only applies to a stepped cluster')
        if by < 0:
            raise SimschedError('the clock cannot go backwards')
        self._cluster['vnow'] = float(self._cluster['vnow']) + by
        self.catch_up()
        return float(self._cluster['vnow'])

    def shutdown(self) -> int:
        """Kill every running workload and cancel everything pending."""
        self.catch_up()
        count = 0
        for job_id in list(self._cluster['active']):
            job = self.load_job(job_id)
            if job is None or job['state'] in FINAL_TOKENS:
                continue
            _kill_group(job.get('pgid'))
            job.update(state=KILL, end_time=self.now())
            self._save_job(job)
            count += 1
        self._cluster['active'] = []
        self._save_cluster()
        return count
