"""Backend-neutral executor interface.

A :class:`JobExecutor` accepts :class:`~portjob.model.JobSpec` values and hands
back :class:`~portjob.model.Job` objects whose status evolves asynchronously.
Status changes reach clients through callbacks registered with
:meth:`JobExecutor.add_callback`; :meth:`JobExecutor.wait` is built on the same
notification path.

Callbacks for one job are delivered strictly in history order by a small
worker pool; different jobs are delivered concurrently, so a slow callback
only delays its own job.
"""
from __future__ import annotations

import abc
import collections
import importlib
import logging
import os
import shutil
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import (Any, Callable, Collection, Deque, Dict, FrozenSet, List, Mapping, Optional,
                    Tuple)

from portjob.model import (Job, JobSpec, JobState, JobStatus, Launcher, TERMINAL_STATES,
                           IllegalTransition, apply_status, path_to, validate_spec)

logger = logging.getLogger(__name__)

StatusCallback = Callable[[str, JobStatus], None]

CAPABILITIES = frozenset({'attach', 'cancel', 'nested'})


class ExecutorError(Exception):
    pass


class DuplicateName(ExecutorError):
    pass


class NotFound(ExecutorError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class InvalidSpec(ExecutorError, ValueError):
    def __init__(self, violations: List[str]) -> None:
        super().__init__('invalid job spec: ' + '; '.join(violations))
        self.violations = list(violations)


class SubmitFailed(ExecutorError):
    """The backend refused the job. ``job`` (if set) has been moved to FAILED."""

    def __init__(self, message: str, job: Optional[Job] = None) -> None:
        super().__init__(message)
        self.job = job


class UnknownJob(ExecutorError):
    pass


class UnknownNativeId(ExecutorError):
    pass


class UnknownLauncher(ExecutorError):
    pass


class WaitTimeout(ExecutorError, TimeoutError):
    pass


# -- launchers ---------------------------------------------------------------

@dataclass(frozen=True)
class LaunchCommand:
    """How to start the processes of a job.

    ``replicas`` identical copies of ``argv`` are started; every copy sees
    ``environment`` added on top of the job's own environment.
    """

    argv: Tuple[str, ...]
    environment: Mapping[str, str] = field(default_factory=dict)
    replicas: int = 1

    def __post_init__(self) -> None:
        if not self.argv:
            raise ValueError('argv must be non-empty')
        object.__setattr__(self, 'argv', tuple(self.argv))

    @property
    def plan(self) -> List[List[str]]:
        return [list(self.argv) for _ in range(self.replicas)]


LauncherFn = Callable[[JobSpec, Mapping[str, Any]], LaunchCommand]

_LAUNCHERS: Dict[str, LauncherFn] = {}


def register_launcher(name: str, fn: LauncherFn) -> None:
    if name in _LAUNCHERS:
        raise DuplicateName(f'launcher {name!r} already registered')
    _LAUNCHERS[name] = fn


def default_mpi_shim() -> str:
    """Locate the bundled ``portjob-mpirun`` shim."""
    env = os.environ.get('PORTJOB_MPI_SHIM')
    if env:
        return env
    found = shutil.which('portjob-mpirun')
    if found:
        return found
    beside = os.path.join(os.path.dirname(sys.executable), 'portjob-mpirun')
    return beside if os.path.exists(beside) else 'portjob-mpirun'


def _single(spec: JobSpec, config: Mapping[str, Any]) -> LaunchCommand:
    return LaunchCommand((spec.executable, *spec.arguments))


def _multiple(spec: JobSpec, config: Mapping[str, Any]) -> LaunchCommand:
    n = spec.resources.total_processes()
    return LaunchCommand((spec.executable, *spec.arguments),
                         {'PORTJOB_NPROCS': str(n)}, replicas=n)


def _mpi_like(spec: JobSpec, config: Mapping[str, Any]) -> LaunchCommand:
    shim = config.get('mpi_shim') or default_mpi_shim()
    n = spec.resources.total_processes()
    return LaunchCommand((shim, '-n', str(n), spec.executable, *spec.arguments),
                         {'PORTJOB_NPROCS': str(n)})


register_launcher(Launcher.SINGLE.value, _single)
register_launcher(Launcher.MULTIPLE.value, _multiple)
register_launcher(Launcher.MPI_LIKE.value, _mpi_like)


def render_launch(spec: JobSpec, **config: Any) -> LaunchCommand:
    try:
        fn = _LAUNCHERS[spec.launcher]
    except KeyError:
        raise UnknownLauncher(f'unknown launcher {spec.launcher!r}') from None
    return fn(spec, config)


# -- registry ----------------------------------------------------------------

@dataclass(frozen=True)
class ExecutorDescriptor:
    name: str
    version: str = '0.1'
    capabilities: FrozenSet[str] = frozenset()

    def __post_init__(self) -> None:
        caps = frozenset(self.capabilities)
        unknown = caps - CAPABILITIES
        if unknown:
            raise ValueError(f'unknown capabilities: {sorted(unknown)}')
        object.__setattr__(self, 'capabilities', caps)


class ExecutorRegistry:
    """Maps backend names to descriptors and constructors. Lookup is case-sensitive."""

    def __init__(self) -> None:
        self._entries: Dict[str, Tuple[ExecutorDescriptor, Callable[..., 'JobExecutor']]] = {}
        self._lock = threading.Lock()

    def register_backend(self, descriptor: ExecutorDescriptor,
                         factory: Callable[..., 'JobExecutor']) -> ExecutorDescriptor:
        with self._lock:
            if descriptor.name in self._entries:
                raise DuplicateName(f'backend {descriptor.name!r} already registered')
            self._entries[descriptor.name] = (descriptor, factory)
        return descriptor

    def lookup(self, name: str) -> ExecutorDescriptor:
        try:
            return self._entries[name][0]
        except KeyError:
            raise NotFound(f'no backend named {name!r}') from None

    def create(self, name: str, **kwargs: Any) -> 'JobExecutor':
        try:
            factory = self._entries[name][1]
        except KeyError:
            raise NotFound(f'no backend named {name!r}') from None
        return factory(**kwargs)

    def names(self) -> List[str]:
        return sorted(self._entries)

    def __contains__(self, name: object) -> bool:
        return name in self._entries


registry = ExecutorRegistry()


def load_backends() -> ExecutorRegistry:
    """The default registry, with the bundled backends registered."""
    importlib.import_module('portjob.backends')
    return registry


def get_executor(name: str, **kwargs: Any) -> 'JobExecutor':
    """Construct a backend from the default registry."""
    return load_backends().create(name, **kwargs)


# -- callback delivery ---------------------------------------------------------

class _Dispatcher:
    """Runs callbacks serialized per job and concurrently across jobs."""

    def __init__(self, workers: int) -> None:
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix='portjob-cb')
        self._lock = threading.Lock()
        self._queues: Dict[str, Deque[Tuple[List[StatusCallback], JobStatus]]] = {}
        self._idle = threading.Condition(self._lock)

    def post(self, job_id: str, callbacks: List[StatusCallback], status: JobStatus) -> None:
        with self._lock:
            queue = self._queues.get(job_id)
            if queue is not None:
                queue.append((callbacks, status))
                return
            self._queues[job_id] = collections.deque([(callbacks, status)])
        self._pool.submit(self._drain, job_id)

    def _drain(self, job_id: str) -> None:
        while True:
            with self._lock:
                queue = self._queues[job_id]
                if not queue:
                    del self._queues[job_id]
                    self._idle.notify_all()
                    return
                callbacks, status = queue[0]
            for cb in callbacks:
                try:
                    cb(job_id, status)
                except Exception:
                    logger.exception('status callback for job %s raised', job_id)
            with self._lock:
                queue.popleft()

    def flush(self, timeout: Optional[float] = None) -> bool:
        with self._lock:
            return self._idle.wait_for(lambda: not self._queues, timeout)

    def shutdown(self) -> None:
        self.flush(timeout=10)
        self._pool.shutdown(wait=True)


# -- executor base class -------------------------------------------------------

class JobExecutor(abc.ABC):
    """Base class of all backends.

    Subclasses implement :meth:`_submit`, :meth:`_cancel` and optionally
    :meth:`_attach`, and report progress through :meth:`_update`.
    """

    descriptor: ExecutorDescriptor = ExecutorDescriptor('abstract')

    def __init__(self, *, callback_workers: int = 8) -> None:
        self._lock = threading.RLock()
        self._changed = threading.Condition(self._lock)
        self._jobs: Dict[str, Job] = {}
        self._by_native: Dict[str, Job] = {}
        self._mirrors: Dict[str, List[Job]] = collections.defaultdict(list)
        self._callbacks: List[StatusCallback] = []
        self._dispatcher = _Dispatcher(callback_workers)
        self._closed = False

    @property
    def name(self) -> str:
        return self.descriptor.name

    # public API ---------------------------------------------------------------

    def add_callback(self, callback: StatusCallback) -> None:
        with self._lock:
            self._callbacks.append(callback)

    def validate(self, spec: JobSpec) -> List[str]:
        return validate_spec(spec)

    def submit(self, spec: JobSpec) -> Job:
        """Submit ``spec`` and return once the backend has accepted (or refused) it.

        Raises :class:`InvalidSpec` before touching the backend if ``spec``
        does not validate, and :class:`SubmitFailed` (after moving the job to
        FAILED) if the backend refuses it.
        """
        violations = self.validate(spec)
        if violations:
            raise InvalidSpec(violations)
        job = Job(spec)
        self._register(job)
        self._submit(job)
        return job

    def cancel(self, job: Job) -> None:
        with self._lock:
            if self._jobs.get(job.id) is not job:
                raise UnknownJob(f'job {job.id} does not belong to this executor')
            if job.state.is_terminal:
                return
        self._cancel(job)

    def attach(self, job: Job, native_id: str) -> Job:
        """Bind a fresh ``job`` to an existing backend job and start tracking it."""
        if job.native_id is not None:
            raise ValueError(f'job {job.id} is already bound to {job.native_id}')
        self._register(job)
        self._attach(job, native_id)
        return job

    def wait(self, job: Job, until: Optional[Collection[JobState]] = None,
             timeout: Optional[float] = None) -> JobStatus:
        """Block until ``job`` has reached a state in ``until`` or a terminal state.

        Returns the most recent status whose state qualifies, so a job that
        already moved past a requested state does not block the caller.
        """
        targets = set(until or ()) | TERMINAL_STATES

        def reached() -> Optional[JobStatus]:
            for status in reversed(job.status_history):
                if status.state in targets:
                    return status
            return None

        with self._changed:
            if not self._changed.wait_for(lambda: reached() is not None, timeout):
                raise WaitTimeout(f'job {job.id} still {job.state} after {timeout} s')
            result = reached()
        assert result is not None
        return result

    def jobs(self) -> List[Job]:
        with self._lock:
            return list(self._jobs.values())

    def flush_callbacks(self, timeout: Optional[float] = None) -> bool:
        """Wait until every status posted so far has been delivered."""
        return self._dispatcher.flush(timeout)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._shutdown()
        self._dispatcher.shutdown()

    def __enter__(self) -> 'JobExecutor':
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()

    # backend hooks --------------------------------------------------------------

    @abc.abstractmethod
    def _submit(self, job: Job) -> None:
        ...

    @abc.abstractmethod
    def _cancel(self, job: Job) -> None:
        ...

    def _attach(self, job: Job, native_id: str) -> None:
        """Default attach: mirror a job this executor instance already tracks."""
        with self._lock:
            primary = self._by_native.get(native_id)
            if primary is None:
                raise UnknownNativeId(f'{self.name}: no job with native id {native_id!r}')
            job.native_id = native_id
            self._mirrors[primary.id].append(job)
            for status in primary.status_history[1:]:
                self._update(job, status, mirror=False)

    def _shutdown(self) -> None:
        pass

    # helpers for subclasses -------------------------------------------------------

    def _bind_native(self, job: Job, native_id: str) -> None:
        with self._lock:
            job.native_id = native_id
            self._by_native[native_id] = job

    def _update(self, job: Job, status: JobStatus, *, mirror: bool = True) -> bool:
        """Apply ``status`` to ``job`` and schedule callbacks.

        Statuses arriving after the job went terminal are dropped: the first
        terminal event wins any cancel/exit race. Returns whether the status
        was recorded.
        """
        with self._lock:
            if job.state.is_terminal:
                if status.state != job.state:
                    logger.debug('job %s: ignoring %s after terminal %s',
                                 job.id, status.state, job.state)
                return False
            try:
                apply_status(job, status)
            except IllegalTransition:
                logger.warning('job %s: dropping illegal transition %s -> %s',
                               job.id, job.state, status.state)
                return False
            self._changed.notify_all()
            # posted under the lock so concurrent updaters cannot reorder deliveries
            if self._callbacks:
                self._dispatcher.post(job.id, list(self._callbacks), status)
            if mirror:
                for other in self._mirrors.get(job.id, ()):
                    self._update(other, status, mirror=False)
        return True

    def _advance(self, job: Job, status: JobStatus) -> bool:
        """Like :meth:`_update` but first synthesizes any intermediate states missed."""
        with self._lock:
            if job.state.is_terminal:
                return False
            chain = path_to(job.state, status.state, has_exit_code=status.exit_code is not None)
            if not chain:
                return False
            for state in chain[:-1]:
                self._update(job, JobStatus(state))
            return self._update(job, status)

    def _register(self, job: Job) -> None:
        with self._lock:
            self._jobs.setdefault(job.id, job)
            if self._callbacks:
                self._dispatcher.post(job.id, list(self._callbacks), job.status)
