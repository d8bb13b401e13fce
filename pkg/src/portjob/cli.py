"""``portjob`` command: run, watch and cancel jobs on any backend; drive pilots."""
from __future__ import annotations

import argparse
import contextlib
import fcntl
import json
import os
import queue
import signal
import subprocess
import sys
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

from portjob.executor import (ExecutorError, InvalidSpec, JobExecutor, NotFound, SubmitFailed,
                              UnknownNativeId, WaitTimeout, load_backends, registry)
from portjob.index import JobIndex, default_state_dir, history, last_state, set_history, write_json
from portjob.model import (Job, JobSpec, JobState, JobStatus, SpecFormatError, load_spec,
                           spec_from_dict, spec_to_dict, validate_spec)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FAILED = 3
EXIT_CANCELED = 4
EXIT_UNKNOWN = 5

# backends whose jobs cannot be re-attached from another process
SUPERVISED = frozenset({'local', 'pilot'})


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE) -> None:
        super().__init__(message)
        self.code = code


def exit_code_for(state: JobState) -> int:
    return {JobState.COMPLETED: EXIT_OK, JobState.FAILED: EXIT_FAILED,
            JobState.CANCELED: EXIT_CANCELED}.get(state, EXIT_OK)


@dataclass
class CliConfig:
    backend: str = 'local'
    dialect: Optional[str] = None
    state_dir: Path = Path('.')
    output: str = 'plain'

    def __post_init__(self) -> None:
        if self.backend not in load_backends():
            raise CliError(f'unknown backend {self.backend!r} (known: {", ".join(registry.names())})')

    @property
    def index(self) -> JobIndex:
        return JobIndex(self.state_dir)

    @property
    def work_dir(self) -> Path:
        return self.state_dir / 'work'


# -- output ------------------------------------------------------------------------

class Printer:
    def __init__(self, output: str, stream: Any = None) -> None:
        self.output = output
        self.stream = stream or sys.stdout

    def _emit(self, line: str) -> None:
        self.stream.write(line + '\n')
        self.stream.flush()

    def event(self, job_id: str, native_id: Optional[str], status: JobStatus) -> None:
        if self.output == 'structured':
            self._emit(json.dumps({'ts': time.time(), 'id': job_id, 'state': status.state.value,
                                   'exit': status.exit_code}))
        else:
            self._emit(f'id={job_id} native={native_id or "-"} state={status.state.value}')

    def status(self, job_id: str, status: JobStatus) -> None:
        if self.output == 'structured':
            self.event(job_id, None, status)
            return
        tail = f' exit={status.exit_code}' if status.exit_code is not None else ''
        self._emit(f'{job_id} {status.state.value}{tail}')

    def record(self, doc: Dict[str, Any]) -> None:
        if self.output == 'structured':
            self._emit(json.dumps(doc, sort_keys=True))
        else:
            self._emit(' '.join(f'{k}={v}' for k, v in doc.items()))


# -- executors and records -----------------------------------------------------------

def make_executor(backend: str, dialect: Optional[str], work_dir: Path) -> JobExecutor:
    if backend == 'batch':
        from portjob.batch.executor import BatchExecutor

        return BatchExecutor(dialect or 'simsched', work_directory=work_dir)
    try:
        return registry.create(backend)
    except NotFound as e:
        raise CliError(str(e)) from None


def read_spec(path: str) -> JobSpec:
    try:
        return load_spec(path)
    except (OSError, SpecFormatError) as e:
        raise CliError(f'{path}: {e}') from None


def new_record(job_id: str, backend: str, spec: JobSpec, cfg: CliConfig) -> Dict[str, Any]:
    return {'id': job_id, 'backend': backend, 'dialect': cfg.dialect, 'native_id': None,
            'spec': spec_to_dict(spec), 'work_dir': str(cfg.work_dir), 'history': [],
            'owner_pid': None}


def sync_record(index: JobIndex, record: Dict[str, Any], job: Job) -> None:
    record['native_id'] = job.native_id
    set_history(record, list(job.status_history))
    index.save(record)


def _collect(executor: JobExecutor) -> 'queue.Queue[Tuple[str, JobStatus]]':
    events: 'queue.Queue[Tuple[str, JobStatus]]' = queue.Queue()
    executor.add_callback(lambda job_id, status: events.put((job_id, status)))
    return events


def _submit(executor: JobExecutor, spec: JobSpec) -> Job:
    try:
        return executor.submit(spec)
    except InvalidSpec as e:
        raise CliError(str(e)) from None
    except SubmitFailed as e:
        if e.job is None:
            raise CliError(str(e), EXIT_FAILED) from None
        return e.job


def follow(executor: JobExecutor, job: Job, events: 'queue.Queue[Tuple[str, JobStatus]]',
           on_event: Callable[[JobStatus], None], *, wait: bool = True) -> JobStatus:
    """Report every status of ``job``; with ``wait`` keep going until it is terminal."""
    while True:
        if not wait:
            executor.flush_callbacks(timeout=5)
        try:
            job_id, status = events.get(timeout=0.2)
        except queue.Empty:
            if not wait:
                return job.status
            continue
        if job_id != job.id:
            continue
        on_event(status)
        if status.is_terminal:
            return status


# -- run / supervise -------------------------------------------------------------------

def cmd_run(cfg: CliConfig, spec_path: str, wait: bool) -> int:
    spec = read_spec(spec_path)
    printer = Printer(cfg.output)
    if not wait and cfg.backend in SUPERVISED:
        return _run_detached(cfg, spec, printer)[0]
    executor = make_executor(cfg.backend, cfg.dialect, cfg.work_dir)
    try:
        return _run_attached(cfg, executor, spec, printer, wait)[0]
    finally:
        executor.close()


def _run_attached(cfg: CliConfig, executor: JobExecutor, spec: JobSpec, printer: Printer,
                  wait: bool) -> Tuple[int, str]:
    violations = executor.validate(spec)
    if violations:
        raise CliError(str(InvalidSpec(violations)))
    events = _collect(executor)
    job = _submit(executor, spec)
    index = cfg.index
    record = new_record(job.id, cfg.backend, spec, cfg)
    record['owner_pid'] = os.getpid() if cfg.backend in SUPERVISED else None
    sync_record(index, record, job)

    def on_event(status: JobStatus) -> None:
        printer.event(job.id, job.native_id, status)
        sync_record(index, record, job)

    final = follow(executor, job, events, on_event, wait=wait)
    if wait or final.is_terminal:
        return exit_code_for(final.state), job.id
    return EXIT_OK, job.id


def _run_detached(cfg: CliConfig, spec: JobSpec, printer: Printer) -> Tuple[int, str]:
    violations = validator(cfg.backend)(spec)
    if violations:
        raise CliError(str(InvalidSpec(violations)))
    index = cfg.index
    job_id = uuid.uuid4().hex[:16]
    record = new_record(job_id, cfg.backend, spec, cfg)
    set_history(record, [JobStatus(JobState.NEW)])
    index.save(record)
    proc = subprocess.Popen(
        [sys.executable, '-m', 'portjob.cli', '--state-dir', str(cfg.state_dir), '_supervise', job_id],
        stdin=subprocess.DEVNULL, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
        start_new_session=True)
    deadline = time.monotonic() + 30
    while time.monotonic() < deadline:
        record = index.load(job_id)
        if record.get('native_id') or last_state(record).is_terminal:
            break
        if proc.poll() is not None:
            break
        time.sleep(0.02)
    for status in history(record):
        printer.event(job_id, record.get('native_id'), status)
    state = last_state(record)
    return (exit_code_for(state) if state.is_terminal else EXIT_OK), job_id


def validator(backend: str) -> Callable[[JobSpec], List[str]]:
    if backend == 'pilot':
        from portjob.pilot.runtime import validate_task

        return validate_task
    return validate_spec


def cmd_supervise(cfg: CliConfig, job_id: str) -> int:
    """Run one job to completion on behalf of a detached ``run``, recording every status."""
    index = cfg.index
    record = index.load(job_id)
    spec = spec_from_dict(record['spec'])
    canceled = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: canceled.set())
    executor = make_executor(record['backend'], record.get('dialect'), Path(record['work_dir']))
    try:
        job = _submit(executor, spec)
        record['owner_pid'] = os.getpid()
        seen = 0
        cancel_sent = False
        while True:
            with contextlib.suppress(WaitTimeout):
                executor.wait(job, timeout=0.1)
            statuses = list(job.status_history)
            if len(statuses) != seen:
                seen = len(statuses)
                record['native_id'] = job.native_id
                set_history(record, statuses)
                index.save(record)
            if job.state.is_terminal:
                return exit_code_for(job.state)
            if canceled.is_set() and not cancel_sent:
                cancel_sent = True
                executor.cancel(job)
    finally:
        executor.close()


# -- status / cancel -----------------------------------------------------------------

def _load(index: JobIndex, job_id: str) -> Dict[str, Any]:
    try:
        return index.load(job_id)
    except KeyError:
        raise CliError(f'unknown job id {job_id!r}', EXIT_UNKNOWN) from None


@contextlib.contextmanager
def attached_batch(record: Dict[str, Any]) -> Iterator[Tuple[JobExecutor, Job]]:
    from portjob.batch.executor import BatchExecutor

    executor = BatchExecutor(record.get('dialect') or 'simsched',
                             work_directory=record['work_dir'])
    try:
        job = Job(spec_from_dict(record['spec']), id=record['id'])
        try:
            executor.attach(job, record['native_id'])
        except UnknownNativeId as e:
            raise CliError(str(e), EXIT_UNKNOWN) from None
        yield executor, job
    finally:
        executor.close()


def refresh(index: JobIndex, record: Dict[str, Any]) -> JobStatus:
    """Current status of a recorded job, querying the backend when it can be reached."""
    statuses = history(record)
    if statuses and statuses[-1].is_terminal:
        return statuses[-1]
    if record['backend'] == 'batch' and record.get('native_id'):
        with attached_batch(record) as (_, job):
            merged = _merge(statuses, job.status_history)
        set_history(record, merged)
        index.save(record)
        return merged[-1]
    return statuses[-1] if statuses else JobStatus(JobState.NEW)


def _merge(known: List[JobStatus], observed: List[JobStatus]) -> List[JobStatus]:
    states = [s.state for s in known]
    extra = [s for s in observed if s.state not in states]
    return known + extra


def cmd_status(cfg: CliConfig, job_id: str) -> int:
    index = cfg.index
    record = _load(index, job_id)
    Printer(cfg.output).status(job_id, refresh(index, record))
    return EXIT_OK


def cmd_cancel(cfg: CliConfig, job_id: str, timeout: float = 30.0) -> int:
    index = cfg.index
    record = _load(index, job_id)
    status = cancel_record(index, record, timeout)
    Printer(cfg.output).status(job_id, status)
    return EXIT_OK


def cancel_record(index: JobIndex, record: Dict[str, Any], timeout: float) -> JobStatus:
    status = refresh(index, record)
    if status.is_terminal:
        return status
    job_id = record['id']
    if record['backend'] == 'batch':
        with attached_batch(record) as (executor, job):
            executor.cancel(job)
            with contextlib.suppress(WaitTimeout):
                executor.wait(job, timeout=timeout)
            merged = _merge(history(record), job.status_history)
        set_history(record, merged)
        index.save(record)
        return merged[-1]
    if record['backend'] == 'pilot-task':
        index.request_cancel(job_id)
    else:
        pid = record.get('owner_pid')
        if pid:
            with contextlib.suppress(ProcessLookupError):
                os.kill(pid, signal.SIGTERM)
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        record = index.load(job_id)
        if last_state(record).is_terminal:
            break
        time.sleep(0.05)
    return history(record)[-1]


# -- pilot -------------------------------------------------------------------------------

def pilot_dir(arg: Optional[str], cfg: CliConfig) -> Path:
    if arg:
        return Path(arg)
    env = os.environ.get('PORTJOB_PILOT_DIR')
    return Path(env) if env else cfg.state_dir / 'pilot'


@contextlib.contextmanager
def pilot_lock(directory: Path) -> Iterator[None]:
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / 'pilot.lock', 'a') as f:
        fcntl.flock(f, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


def _pilot_state(directory: Path) -> Dict[str, Any]:
    try:
        with open(directory / 'pilot.json') as f:
            return json.load(f)
    except FileNotFoundError:
        raise CliError(f'no pilot in {directory}; run "portjob pilot start" first') from None


def cmd_pilot_start(cfg: CliConfig, directory: Path, alloc_path: str, via: str,
                    cores: Optional[int], gpus: int, timeout: float) -> int:
    from portjob.pilot.runtime import new_pilot_id

    spec = read_spec(alloc_path)
    sub_cfg = CliConfig(backend=via, dialect=cfg.dialect, state_dir=cfg.state_dir,
                        output=cfg.output)
    with pilot_lock(directory):
        if (directory / 'pilot.json').exists():
            state = _pilot_state(directory)
            alloc = cfg.index.load(state['allocation'])
            if not refresh(cfg.index, alloc).is_terminal:
                raise CliError(f'pilot {state["id"]} is still running in {directory}')
        quiet = Printer(cfg.output, stream=open(os.devnull, 'w'))
        if via in SUPERVISED:
            code, alloc_id = _run_detached(sub_cfg, spec, quiet)
        else:
            executor = make_executor(via, cfg.dialect, cfg.work_dir)
            try:
                code, alloc_id = _run_attached(sub_cfg, executor, spec, quiet, wait=False)
            finally:
                executor.close()
        if code != EXIT_OK:
            return code
        status = _await_active(cfg.index, alloc_id, timeout)
        if status.state is not JobState.ACTIVE:
            print(f'portjob: allocation {alloc_id} ended {status.state.value}: '
                  f'{status.message or ""}', file=sys.stderr)
            return exit_code_for(status.state) or EXIT_FAILED
        state = {'id': new_pilot_id(), 'allocation': alloc_id, 'via': via,
                 'nodes': 1 if via == 'local' else spec.resources.node_count,
                 'cores_per_node': cores or os.cpu_count() or 1, 'gpus_per_node': gpus,
                 'splits': []}
        write_json(directory / 'pilot.json', state)
    print(state['id'])
    return EXIT_OK


def _await_active(index: JobIndex, alloc_id: str, timeout: float) -> JobStatus:
    deadline = time.monotonic() + timeout
    while True:
        record = index.load(alloc_id)
        status = refresh(index, record)
        if status.state is JobState.ACTIVE or status.is_terminal:
            return status
        if time.monotonic() > deadline:
            cancel_record(index, record, 10)
            return JobStatus(JobState.FAILED, message=f'not active after {timeout} s')
        time.sleep(0.2)


def _pool(state: Dict[str, Any]) -> Any:
    from portjob.pilot.pool import ResourcePool

    return ResourcePool.uniform(state['nodes'], state['cores_per_node'], state['gpus_per_node'])


def _apply_splits(root: Any, splits: Sequence[int]) -> None:
    """Replay recorded splits: each one divides every current leaf."""
    for k in splits:
        for leaf in root.leaves():
            leaf.spawn_child(None, k)


def cmd_pilot_split(cfg: CliConfig, directory: Path, k: int) -> int:
    from portjob.pilot.instance import InsufficientFreeNodes

    printer = Printer(cfg.output)
    with pilot_lock(directory):
        state = _pilot_state(directory)
        from portjob.pilot.instance import Instance

        root = Instance(_pool(state), None, id=state['id'])  # type: ignore[arg-type]
        _apply_splits(root, state['splits'])
        new = []
        try:
            for leaf in root.leaves():
                new.extend(leaf.spawn_child(None, k))
        except InsufficientFreeNodes as e:
            raise CliError(str(e)) from None
        state['splits'].append(k)
        write_json(directory / 'pilot.json', state)
    for child in new:
        printer.record({'instance': child.id, 'nodes': ','.join(map(str, child.pool.node_ids()))})
    return EXIT_OK


def cmd_pilot_submit(cfg: CliConfig, directory: Path, task_paths: Sequence[str]) -> int:
    from portjob.pilot.runtime import PilotExecutor

    specs = [read_spec(p) for p in task_paths]
    printer = Printer(cfg.output)
    index = cfg.index
    with pilot_lock(directory):
        state = _pilot_state(directory)
        alloc = index.load(state['allocation'])
        pilot = PilotExecutor(_pool(state), id=state['id'])
        _apply_splits(pilot.root, state['splits'])
        try:
            return _pilot_run(pilot, specs, index, alloc, printer)
        finally:
            pilot.close()


def _pilot_run(pilot: Any, specs: List[JobSpec], index: JobIndex, alloc: Dict[str, Any],
               printer: Printer) -> int:
    from portjob.pilot.instance import OversizedTask

    if refresh(index, alloc).is_terminal:
        pilot.end_allocation()
    events = _collect(pilot)
    records: Dict[str, Dict[str, Any]] = {}
    jobs: List[Job] = []
    for spec in specs:
        try:
            job = pilot.submit(spec)
        except InvalidSpec as e:
            print(f'portjob: {e}', file=sys.stderr)
            continue
        except (OversizedTask, SubmitFailed) as e:
            job = e.job
        jobs.append(job)
        rec = new_record(job.id, 'pilot-task', spec, CliConfig('pilot', None, index.root))
        rec['owner_pid'] = os.getpid()
        records[job.id] = rec
        sync_record(index, rec, job)

    remaining: Dict[str, Job] = {}
    for job in jobs:
        # one decision per job: printed now, or later from its terminal event
        status = job.status
        if status.is_terminal:
            printer.event(job.id, job.native_id, status)
        else:
            remaining[job.id] = job
    last_check = time.monotonic()
    while remaining:
        try:
            job_id, status = events.get(timeout=0.2)
        except queue.Empty:
            job_id = None
        if job_id in remaining and status.is_terminal:
            job = remaining.pop(job_id)
            sync_record(index, records[job_id], job)
            printer.event(job_id, job.native_id, status)
        if time.monotonic() - last_check > 1.0:
            last_check = time.monotonic()
            for jid in [j for j in remaining if index.cancel_requested(j)]:
                pilot.cancel(remaining[jid])
            if refresh(index, index.load(alloc['id'])).is_terminal:
                pilot.end_allocation()
    states = [j.state for j in jobs]
    if JobState.FAILED in states or len(jobs) < len(specs):
        return EXIT_FAILED
    if JobState.CANCELED in states:
        return EXIT_CANCELED
    return EXIT_OK


def cmd_pilot_drain(cfg: CliConfig, directory: Path) -> int:
    with pilot_lock(directory):  # waits for submissions still running
        state = _pilot_state(directory)
        alloc = cfg.index.load(state['allocation'])
        status = cancel_record(cfg.index, alloc, 30)
        (directory / 'pilot.json').unlink()
    Printer(cfg.output).status(state['allocation'], status)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--output', choices=('plain', 'structured'), default=argparse.SUPPRESS,
                        help='plain text or one JSON record per line')
    common.add_argument('--state-dir', default=argparse.SUPPRESS,
                        help='job index directory (default: $PORTJOB_DIR or ~/.portjob)')

    parser = argparse.ArgumentParser(prog='portjob', parents=[common],
                                     description='Submit and manage jobs on any backend.')
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', parents=[common], help='submit a job spec file')
    run.add_argument('spec')
    run.add_argument('--backend', default='local')
    run.add_argument('--dialect', help='batch dialect name or file')
    run.add_argument('--wait', action='store_true', help='block until the job is terminal')

    status = sub.add_parser('status', parents=[common], help='print the state of a job')
    status.add_argument('id')
    cancel = sub.add_parser('cancel', parents=[common], help='cancel a job')
    cancel.add_argument('id')

    pilot = sub.add_parser('pilot', parents=[common], help='run tasks inside an allocation')
    pilot.add_argument('--dir', help='pilot state directory (default: $PORTJOB_PILOT_DIR)')
    psub = pilot.add_subparsers(dest='pilot_command', required=True)
    start = psub.add_parser('start', parents=[common])
    start.add_argument('--alloc', required=True, help='allocation job spec file')
    start.add_argument('--via', default='local', help='backend that acquires the allocation')
    start.add_argument('--dialect')
    start.add_argument('--cores-per-node', type=int)
    start.add_argument('--gpus-per-node', type=int, default=0)
    start.add_argument('--timeout', type=float, default=120.0)
    psubmit = psub.add_parser('submit', parents=[common])
    psubmit.add_argument('tasks', nargs='+', help='task spec files')
    split = psub.add_parser('split', parents=[common])
    split.add_argument('--children', type=int, required=True)
    psub.add_parser('drain', parents=[common])

    sim = sub.add_parser('sim', help='manage the simulated scheduler (same as ssim)')
    sim.add_argument('args', nargs=argparse.REMAINDER)

    supervise = sub.add_parser('_supervise')
    supervise.add_argument('id')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == 'sim':
        from portjob.simsched.tools import ssim_main

        return ssim_main(args.args)
    state_dir = Path(getattr(args, 'state_dir', None) or default_state_dir())
    try:
        cfg = CliConfig(backend=getattr(args, 'backend', 'local'),
                        dialect=getattr(args, 'dialect', None), state_dir=state_dir,
                        output=getattr(args, 'output', 'plain'))
        if args.command == 'run':
            return cmd_run(cfg, args.spec, args.wait)
        if args.command == 'status':
            return cmd_status(cfg, args.id)
        if args.command == 'cancel':
            return cmd_cancel(cfg, args.id)
        if args.command == '_supervise':
            return cmd_supervise(cfg, args.id)
        directory = pilot_dir(args.dir, cfg)
        if args.pilot_command == 'start':
            return cmd_pilot_start(cfg, directory, args.alloc, args.via, args.cores_per_node,
                                   args.gpus_per_node, args.timeout)
        if args.pilot_command == 'submit':
            return cmd_pilot_submit(cfg, directory, args.tasks)
        if args.pilot_command == 'split':
            return cmd_pilot_split(cfg, directory, args.children)
        return cmd_pilot_drain(cfg, directory)
    except CliError as e:
        print(f'portjob: {e}', file=sys.stderr)
        return e.code
    except ExecutorError as e:
        print(f'portjob: {e}', file=sys.stderr)
        return EXIT_FAILED


if __name__ == '__main__':
    sys.exit(main())
