"""Executor binding for command-line batch schedulers."""
from __future__ import annotations

import logging
import os
import tempfile
import threading
import time
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

from portjob.batch.adapter import (IdParseError, Polled, QueueAdapterDescriptor,
                                   StatusCommandFailed, exit_file_path, load_dialect,
                                   parse_native_id, poll_once, render_script, run_command)
from portjob.executor import (ExecutorDescriptor, ExecutorError, JobExecutor, SubmitFailed,
                              UnknownNativeId)
from portjob.model import Job, JobState, JobStatus

logger = logging.getLogger(__name__)


class CancelFailed(ExecutorError):
    pass


class BatchExecutor(JobExecutor):
    """Submits jobs through a scheduler's command-line tools.

    A single polling thread queries the status of every tracked job with one
    status command per ``poll_interval``. Statuses the poller did not observe
    (typically a short ACTIVE phase) are synthesized so histories stay legal.

    Parameters
    ----------
    adapter
        A descriptor, a dialect file path, or the name of a bundled dialect.
    work_directory
        Where submit scripts and exit files go for jobs without a directory.
    env
        Extra environment for scheduler commands (e.g. ``SIMSCHED_DIR``).
    poll_interval
        Overrides the dialect's interval.
    failure_threshold
        Consecutive failed status commands tolerated before the affected jobs
        are failed.
    """

    descriptor = ExecutorDescriptor('batch', capabilities={'attach', 'cancel'})

    def __init__(self, adapter: Union[QueueAdapterDescriptor, str, os.PathLike] = 'simsched', *,
                 work_directory: Optional[Union[str, os.PathLike]] = None,
                 env: Optional[Mapping[str, str]] = None,
                 poll_interval: Optional[float] = None, failure_threshold: int = 3,
                 mpi_shim: Optional[str] = None, callback_workers: int = 8) -> None:
        super().__init__(callback_workers=callback_workers)
        if not isinstance(adapter, QueueAdapterDescriptor):
            adapter = load_dialect(adapter)
        self.adapter = adapter
        self.poll_interval = poll_interval or adapter.poll_interval
        self.failure_threshold = failure_threshold
        self.mpi_shim = mpi_shim
        if work_directory is None:
            work_directory = Path(tempfile.gettempdir()) / f'portjob-{os.getuid()}'
        self.work_directory = Path(work_directory)
        self.env = dict(os.environ)
        self.env.update(env or {})
        self.status_command_times: List[float] = []
        self._exit_files: Dict[str, Path] = {}
        self._failures = 0
        self._stop = threading.Event()
        self._wakeup = threading.Condition(self._lock)
        self._poller = threading.Thread(target=self._poll_loop, name=f'portjob-poll-{adapter.name}',
                                        daemon=True)
        self._poller.start()

    @property
    def status_commands(self) -> int:
        return len(self.status_command_times)

    def _run(self, argv: List[str], cwd: Optional[Path] = None) -> tuple:
        return run_command(argv, env=self.env, cwd=cwd)

    def _run_status(self, argv: List[str]) -> tuple:
        self.status_command_times.append(time.monotonic())
        return self._run(argv)

    def _fail(self, job: Job, message: str) -> SubmitFailed:
        self._update(job, JobStatus(JobState.FAILED, message=message))
        return SubmitFailed(message, job)

    def _submit(self, job: Job) -> None:
        spec = job.spec
        workdir = self._workdir(job)
        try:
            script = render_script(spec, self.adapter, job_id=job.id, workdir=workdir,
                                   mpi_shim=self.mpi_shim)
            path = script.write()
        except SubmitFailed as e:
            self._update(job, JobStatus(JobState.FAILED, message=str(e)))
            e.job = job
            raise
        except OSError as e:
            raise self._fail(job, f'cannot write submit script: {e}') from None
        rc, out, err = self._run([*self.adapter.submit_argv, str(path)], cwd=path.parent)
        if rc != 0:
            raise self._fail(job, f'submit command exited {rc}: {(err or out).strip()}')
        try:
            native_id = parse_native_id(out, self.adapter)
        except IdParseError as e:
            raise self._fail(job, str(e)) from None
        with self._lock:
            self._bind_native(job, native_id)
            self._exit_files[native_id] = exit_file_path(script.path.parent, job.id)
            self._update(job, JobStatus(JobState.QUEUED))
            self._wakeup.notify_all()

    def _cancel(self, job: Job) -> None:
        if job.native_id is None:
            return
        rc, out, err = self._run([*self.adapter.cancel_argv, job.native_id])
        if rc != 0 and not job.state.is_terminal:
            raise CancelFailed(f'cancel of {job.native_id} exited {rc}: {(err or out).strip()}')

    def _workdir(self, job: Job) -> Path:
        return Path(job.spec.directory) if job.spec.directory else self.work_directory

    def _attach(self, job: Job, native_id: str) -> None:
        with self._lock:
            if native_id in self._by_native:
                return super()._attach(job, native_id)  # already polled: mirror it
        # a job submitted earlier under the same client id left its exit file here
        exit_file = exit_file_path(self._workdir(job), job.id)
        try:
            result = poll_once([native_id], self.adapter, exit_files={native_id: exit_file},
                               runner=self._run_status)
        except StatusCommandFailed as e:
            raise UnknownNativeId(f'cannot query {native_id}: {e}') from None
        polled = result.get(native_id)
        if polled is None or polled.vanished:
            raise UnknownNativeId(f'{self.adapter.name} does not know job {native_id}')
        with self._lock:
            job.native_id = native_id
            self._by_native.setdefault(native_id, job)
            self._exit_files.setdefault(native_id, exit_file)
            self._apply(job, polled)
            self._wakeup.notify_all()

    # -- polling ------------------------------------------------------------------

    def _tracked(self) -> Dict[str, Job]:
        with self._lock:
            return {j.native_id: j for j in self._jobs.values()
                    if j.native_id is not None and not j.state.is_terminal}

    def _poll_loop(self) -> None:
        while not self._stop.is_set():
            with self._lock:
                self._wakeup.wait_for(lambda: self._stop.is_set() or self._tracked(),
                                      timeout=self.poll_interval)
            if self._stop.is_set():
                return
            tracked = self._tracked()
            if tracked:
                self.poll(tracked)
            self._stop.wait(self.poll_interval)

    def poll(self, tracked: Optional[Dict[str, Job]] = None) -> None:
        """Run one status query and apply the results."""
        tracked = self._tracked() if tracked is None else tracked
        ids = sorted(tracked)
        try:
            results = poll_once(ids, self.adapter, exit_files=self._exit_files,
                                runner=self._run_status)
        except StatusCommandFailed as e:
            self._failures += 1
            logger.warning('%s (failure %d of %d)', e, self._failures, self.failure_threshold)
            if self._failures >= self.failure_threshold:
                for job in tracked.values():
                    self._update(job, JobStatus(JobState.FAILED, message=str(e)))
                self._failures = 0
            return
        self._failures = 0
        for native_id, polled in results.items():
            self._apply(tracked[native_id], polled)

    def _apply(self, job: Job, polled: Polled) -> None:
        with self._lock:
            if polled.state == job.state:
                return
            if polled.state is JobState.QUEUED and job.state is JobState.ACTIVE:
                return  # stale report
            status = JobStatus(polled.state, exit_code=polled.exit_code, message=polled.message)
            self._advance(job, status)

    def _shutdown(self) -> None:
        self._stop.set()
        with self._lock:
            self._wakeup.notify_all()
        self._poller.join(timeout=5)
