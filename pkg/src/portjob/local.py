"""Run jobs as processes on the current machine.

One :class:`ProcessMonitor` thread per backend instance reaps every child it
spawned. On Linux it waits on pidfds through a selector, elsewhere it falls
back to polling. Each job's processes live in their own session so that
cancellation can signal the whole process tree at once.
"""
from __future__ import annotations

import logging
import contextlib
import os
import selectors
import signal
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import IO, Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from portjob.executor import ExecutorDescriptor, JobExecutor, render_launch
from portjob.model import Job, JobSpec, JobState, JobStatus

logger = logging.getLogger(__name__)

DEFAULT_GRACE = 5.0

ExitCallback = Callable[[subprocess.Popen, int], None]


def base_environment() -> Dict[str, str]:
    return {
        'PATH': os.environ.get('PATH', os.defpath),
        'HOME': os.environ.get('HOME', '/'),
    }


class ProcessMonitor:
    """Spawns child processes and reports their exit from a single thread."""

    def __init__(self, name: str = 'portjob-reaper') -> None:
        self._lock = threading.Lock()
        self._use_pidfd = hasattr(os, 'pidfd_open')
        self._selector = selectors.DefaultSelector()
        self._wake_r, self._wake_w = os.pipe()
        os.set_blocking(self._wake_r, False)
        os.set_blocking(self._wake_w, False)
        self._selector.register(self._wake_r, selectors.EVENT_READ)
        self._incoming: List[Tuple[subprocess.Popen, ExitCallback]] = []
        self._watched: Dict[int, Tuple[subprocess.Popen, ExitCallback]] = {}
        self._closing = False
        self._quit = False
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._thread.start()

    def spawn(self, argv: Sequence[str], *, env: Mapping[str, str], cwd: Optional[str],
              stdin: Any, stdout: Any, stderr: Any, on_exit: ExitCallback) -> subprocess.Popen:
        """Start ``argv`` in a new session. Raises ``OSError`` if it cannot be started."""
        if self._closing:
            raise RuntimeError('process monitor is closed')
        proc = subprocess.Popen(list(argv), env=dict(env), cwd=cwd, stdin=stdin,
                                stdout=stdout, stderr=stderr, start_new_session=True,
                                close_fds=True)
        with self._lock:
            self._incoming.append((proc, on_exit))
        self._wake(b'x')
        return proc

    def _wake(self, token: bytes) -> None:
        try:
            os.write(self._wake_w, token)
        except BlockingIOError:
            pass  # the pipe is full, so a wakeup is already pending

    def live_count(self) -> int:
        with self._lock:
            return len(self._watched) + len(self._incoming)

    def close(self, timeout: float = 10.0) -> None:
        self._closing = True
        with self._lock:
            procs = [p for p, _ in self._watched.values()] + [p for p, _ in self._incoming]
        for proc in procs:
            signal_group(proc, signal.SIGKILL)
        deadline = time.monotonic() + timeout
        while self.live_count() and time.monotonic() < deadline:
            time.sleep(0.01)
        self._quit = True
        self._wake(b'q')
        self._thread.join(timeout=2)

    def _adopt(self) -> None:
        with self._lock:
            incoming, self._incoming = self._incoming, []
        for proc, cb in incoming:
            if self._use_pidfd:
                try:
                    fd = os.pidfd_open(proc.pid)
                except OSError:
                    # already reaped elsewhere; report straight away
                    self._finish(proc, cb)
                    continue
                self._selector.register(fd, selectors.EVENT_READ)
            else:
                fd = -proc.pid
            with self._lock:
                self._watched[fd] = (proc, cb)

    def _finish(self, proc: subprocess.Popen, cb: ExitCallback) -> None:
        rc = proc.wait()
        try:
            cb(proc, rc)
        except Exception:
            logger.exception('exit callback for pid %d raised', proc.pid)

    def _run(self) -> None:
        timeout = None if self._use_pidfd else 0.01
        while True:
            for key, _ in self._selector.select(timeout):
                if key.fd == self._wake_r:
                    with contextlib.suppress(BlockingIOError):
                        os.read(self._wake_r, 4096)
                    if self._quit:
                        return
                    continue
                with self._lock:
                    proc, cb = self._watched.pop(key.fd)
                self._selector.unregister(key.fd)
                os.close(key.fd)
                self._finish(proc, cb)
            self._adopt()
            if not self._use_pidfd:
                with self._lock:
                    done = [fd for fd, (p, _) in self._watched.items() if p.poll() is not None]
                    entries = [self._watched.pop(fd) for fd in done]
                for proc, cb in entries:
                    self._finish(proc, cb)


def _running(proc: subprocess.Popen) -> bool:
    """True while ``proc`` has not exited. Never reaps, unlike ``Popen.poll``."""
    if proc.returncode is not None:
        return False
    try:
        info = os.waitid(os.P_PID, proc.pid, os.WEXITED | os.WNOHANG | os.WNOWAIT)
    except ChildProcessError:
        return False
    return info is None


def signal_group(proc: subprocess.Popen, sig: int) -> None:
    if proc.returncode is not None:
        return
    try:
        os.killpg(proc.pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


@dataclass
class ProcessGroup:
    """All processes of one job, with cancellation and exit aggregation.

    The group finishes once every member has exited. ``exit_code`` is 0 if
    all members exited 0, otherwise the first nonzero code observed (signal
    deaths encoded as ``128 + signum``). The first failure terminates the
    surviving members.
    """

    on_done: Callable[['ProcessGroup'], None]
    procs: List[subprocess.Popen] = field(default_factory=list)
    started: float = field(default_factory=time.time)
    exit_code: Optional[int] = None
    cancel_requested: bool = False
    finished: bool = False
    _remaining: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock)
    _timer: Optional[threading.Timer] = None
    _files: List[IO[bytes]] = field(default_factory=list)

    def start(self, monitor: ProcessMonitor, plans: Sequence[Tuple[Sequence[str], Mapping[str, str]]],
              *, cwd: Optional[str] = None, stdin_path: Optional[str] = None,
              stdout_path: Optional[str] = None, stderr_path: Optional[str] = None) -> None:
        try:
            stdin = self._open(stdin_path, 'rb') if stdin_path else subprocess.DEVNULL
            stdout = self._open(stdout_path, 'wb') if stdout_path else subprocess.DEVNULL
            if stderr_path and stderr_path == stdout_path:
                stderr = stdout
            else:
                stderr = self._open(stderr_path, 'wb') if stderr_path else subprocess.DEVNULL
            self._remaining = len(plans)
            for argv, env in plans:
                proc = monitor.spawn(argv, env=env, cwd=cwd, stdin=stdin, stdout=stdout,
                                     stderr=stderr, on_exit=self._member_exited)
                with self._lock:
                    self.procs.append(proc)
                    # a member that failed (or a cancel) before this one existed missed it
                    late = self.cancel_requested or self.exit_code not in (None, 0)
                if late:
                    signal_group(proc, signal.SIGTERM)
        except BaseException:
            with self._lock:
                self.finished = True  # suppress on_done for partially started groups
            for proc in self.procs:
                signal_group(proc, signal.SIGKILL)
            raise
        finally:
            for f in self._files:
                f.close()
            self._files.clear()

    def _open(self, path: str, mode: str) -> IO[bytes]:
        f = open(path, mode)
        self._files.append(f)
        return f

    @property
    def pid(self) -> int:
        return self.procs[0].pid

    def alive(self) -> bool:
        return any(_running(p) for p in self.procs)

    def terminate(self, grace: float = DEFAULT_GRACE) -> bool:
        """Send SIGTERM to every member, escalating to SIGKILL after ``grace`` seconds.

        Returns False (and does nothing) if the group already exited.
        """
        with self._lock:
            if self.finished or not self.alive():
                return False
            self.cancel_requested = True
            for proc in self.procs:
                signal_group(proc, signal.SIGTERM)
            self._timer = threading.Timer(grace, self.kill)
            self._timer.daemon = True
            self._timer.start()
        return True

    def kill(self) -> None:
        for proc in self.procs:
            signal_group(proc, signal.SIGKILL)

    def _member_exited(self, proc: subprocess.Popen, rc: int) -> None:
        code = rc if rc >= 0 else 128 - rc
        with self._lock:
            self._remaining -= 1
            first_failure = code != 0 and self.exit_code in (None, 0)
            if self.exit_code is None or first_failure:
                self.exit_code = code
            done = self._remaining <= 0 and not self.finished
            if done:
                self.finished = True
                if self._timer is not None:
                    self._timer.cancel()
            siblings = [p for p in self.procs if p is not proc]
        if first_failure and not self.cancel_requested:
            for sibling in siblings:
                signal_group(sibling, signal.SIGTERM)
        if done:
            self.on_done(self)

    def final_status(self) -> JobStatus:
        if self.cancel_requested:
            return JobStatus(JobState.CANCELED, message='canceled')
        if self.exit_code == 0:
            return JobStatus(JobState.COMPLETED, exit_code=0)
        msg = f'exit code {self.exit_code}'
        if self.exit_code is not None and self.exit_code > 128:
            try:
                msg = f'killed by {signal.Signals(self.exit_code - 128).name}'
            except ValueError:
                pass
        return JobStatus(JobState.FAILED, exit_code=self.exit_code, message=msg)


def process_plans(spec: JobSpec, *, mpi_shim: Optional[str] = None,
                  extra_env: Optional[Sequence[Mapping[str, str]]] = None
                  ) -> List[Tuple[Sequence[str], Dict[str, str]]]:
    """argv/environment pairs for every process the local machine should start.

    ``extra_env`` optionally supplies per-replica additions (slot bindings).
    """
    launch = render_launch(spec, mpi_shim=mpi_shim)
    plans = []
    for rank, argv in enumerate(launch.plan):
        env = base_environment()
        env.update(spec.environment)
        env.update(launch.environment)
        if launch.replicas > 1:
            env['PORTJOB_RANK'] = str(rank)
        if extra_env is not None:
            env.update(extra_env[rank])
        plans.append((argv, env))
    return plans


class LocalExecutor(JobExecutor):
    """Executor for a machine without a resource manager.

    ``node_count`` is ignored: everything runs here. The ``multiple`` launcher
    starts ``total_processes()`` copies; ``mpi_like`` goes through the
    ``portjob-mpirun`` shim.
    """

    descriptor = ExecutorDescriptor('local', capabilities={'attach', 'cancel'})

    def __init__(self, *, grace_period: float = DEFAULT_GRACE,
                 mpi_shim: Optional[str] = None, callback_workers: int = 8) -> None:
        super().__init__(callback_workers=callback_workers)
        self.grace_period = grace_period
        self.mpi_shim = mpi_shim
        self._monitor = ProcessMonitor()
        self._groups: Dict[str, ProcessGroup] = {}

    def local_spec(self, spec: JobSpec) -> JobSpec:
        r = spec.resources
        if r.node_count == 1:
            return spec
        return spec.with_(resources=type(r)(1, r.processes_per_node, r.cpu_cores_per_process,
                                            r.gpu_cores_per_process, r.exclusive))

    def _submit(self, job: Job) -> None:
        spec = self.local_spec(job.spec)
        with self._lock:
            self._update(job, JobStatus(JobState.QUEUED))
            group = ProcessGroup(on_done=lambda g, job=job: self._group_done(job, g))
            try:
                group.start(self._monitor, process_plans(spec, mpi_shim=self.mpi_shim),
                            cwd=spec.directory, stdin_path=spec.stdin_path,
                            stdout_path=spec.stdout_path, stderr_path=spec.stderr_path)
            except OSError as e:
                self._update(job, JobStatus(JobState.FAILED, message=f'spawn failed: {e}'))
                return
            self._groups[job.id] = group
            self._bind_native(job, str(group.pid))
            self._update(job, JobStatus(JobState.ACTIVE))

    def _group_done(self, job: Job, group: ProcessGroup) -> None:
        with self._lock:
            self._groups.pop(job.id, None)
            self._update(job, group.final_status())

    def _cancel(self, job: Job) -> None:
        with self._lock:
            group = self._groups.get(job.id)
        if group is not None:
            group.terminate(self.grace_period)

    def live_processes(self) -> int:
        return self._monitor.live_count()

    def _shutdown(self) -> None:
        with self._lock:
            groups = list(self._groups.values())
        for group in groups:
            group.cancel_requested = True
        self._monitor.close()
