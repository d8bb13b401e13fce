"""Pilot executor: runs many small tasks inside one allocation acquired from any backend."""
from __future__ import annotations

import itertools
import logging
import os
import uuid
from typing import Any, Dict, List, Optional

from portjob.executor import (ExecutorDescriptor, ExecutorError, InvalidSpec, JobExecutor,
                              SubmitFailed, WaitTimeout, get_executor)
from portjob.local import DEFAULT_GRACE, ProcessGroup, ProcessMonitor, process_plans
from portjob.model import (Job, JobAttributes, JobSpec, JobState, JobStatus, Launcher,
                           ResourceSpec, validate_spec)
from portjob.pilot.instance import Instance, OversizedTask, Task
from portjob.pilot.pool import ResourcePool

logger = logging.getLogger(__name__)

ALLOCATION_ENDED = 'allocation ended'
TASK_LAUNCHERS = frozenset({Launcher.SINGLE.value, Launcher.MULTIPLE.value})


class AgentStartFailed(ExecutorError):
    pass


def validate_task(spec: JobSpec) -> List[str]:
    # tasks may be zero-duration; wall time only matters to batch schedulers
    problems = validate_spec(spec, allow_zero_wall_time=True)
    if spec.launcher not in TASK_LAUNCHERS:
        problems.append(f"launcher '{spec.launcher}' is not available for pilot tasks")
    return problems


class PilotExecutor(JobExecutor):
    """Executor whose jobs are tasks placed on slots of a pilot allocation.

    Tasks run as local processes. The slot assigned to each process is
    exported as ``PORTJOB_NODE``, ``PORTJOB_CORES`` and ``PORTJOB_GPUS``.
    ``root`` is the top scheduler instance; see :func:`spawn_child` for
    nesting.
    """

    descriptor = ExecutorDescriptor('pilot', capabilities={'attach', 'cancel', 'nested'})

    def __init__(self, pool: ResourcePool, *, allocation: Optional[Job] = None,
                 via: Optional[JobExecutor] = None, owns_via: bool = False,
                 grace_period: float = DEFAULT_GRACE, callback_workers: int = 8,
                 id: Optional[str] = None) -> None:
        super().__init__(callback_workers=callback_workers)
        self.allocation = allocation
        self.via = via
        self.grace_period = grace_period
        self._owns_via = owns_via
        self._monitor = ProcessMonitor('portjob-pilot')
        self._tasks: Dict[str, Task] = {}
        self._seq = itertools.count()
        self.root = Instance(pool, self, id=id or new_pilot_id())

    # -- JobExecutor hooks ------------------------------------------------------------

    def validate(self, spec: JobSpec) -> List[str]:
        return validate_task(spec)

    def submit_to(self, instance: Instance, spec: JobSpec) -> Job:
        """Submit a task to a specific instance of this pilot's hierarchy."""
        violations = self.validate(spec)
        if violations:
            raise InvalidSpec(violations)
        job = Job(spec)
        self._register(job)
        self._enqueue(job, instance)
        return job

    def _submit(self, job: Job) -> None:
        self._enqueue(job, self.root)

    def _enqueue(self, job: Job, instance: Instance) -> None:
        task = Task(job)
        with self._lock:
            self._tasks[job.id] = task
            self._bind_native(job, f'{self.root.id}-{next(self._seq)}')
        error = instance.submit(task)
        if error is not None:
            if instance.ended is not None:
                raise SubmitFailed(error, job)
            raise OversizedTask(error, job)

    def _cancel(self, job: Job) -> None:
        with self._lock:
            task = self._tasks.get(job.id)
        if task is not None and task.instance is not None:
            task.instance.cancel(task, self.grace_period)

    def _shutdown(self) -> None:
        self.root.drain('pilot closed')
        self._monitor.close()
        if self.allocation is not None and self.via is not None:
            if not self.allocation.state.is_terminal:
                try:
                    self.via.cancel(self.allocation)
                    self.via.wait(self.allocation, timeout=30)
                except (ExecutorError, WaitTimeout) as e:
                    logger.warning('releasing allocation %s: %s', self.allocation.native_id, e)
            if self._owns_via:
                self.via.close()

    # -- called by instances ----------------------------------------------------------

    def report(self, task: Task, status: JobStatus) -> None:
        self._advance(task.job, status)

    def launch(self, task: Task) -> Optional[str]:
        """Start the processes of a placed task. Returns an error message on failure."""
        assert task.slot is not None and task.instance is not None
        spec = task.job.spec
        instance = task.instance
        group = ProcessGroup(on_done=lambda g: instance.task_finished(task, g.final_status()))
        plans = process_plans(spec, extra_env=[r.environment() for r in task.slot.ranks])
        try:
            group.start(self._monitor, plans, cwd=spec.directory, stdin_path=spec.stdin_path,
                        stdout_path=spec.stdout_path, stderr_path=spec.stderr_path)
        except OSError as e:
            return f'spawn failed: {e}'
        task.group = group
        self._update(task.job, JobStatus(JobState.ACTIVE))
        return None

    def end_allocation(self, message: str = ALLOCATION_ENDED) -> None:
        self.root.drain(message)

    def live_processes(self) -> int:
        return self._monitor.live_count()

    def instances(self) -> List[Instance]:
        return self.root.walk()


def new_pilot_id() -> str:
    return f'pilot-{uuid.uuid4().hex[:8]}'


def default_allocation(wall_time: float = 86400.0, nodes: int = 1) -> JobSpec:
    """A placeholder job that just holds its allocation for ``wall_time`` seconds.

    Multi-node allocations use the ``multiple`` launcher, one sleeper per node.
    """
    launcher = Launcher.SINGLE if nodes == 1 else Launcher.MULTIPLE
    return JobSpec('/bin/sleep', (f'{wall_time:g}',),
                   resources=ResourceSpec(node_count=nodes),
                   attributes=JobAttributes(wall_time=wall_time), launcher=launcher.value)


def start_pilot(allocation: Optional[JobSpec] = None, via: str = 'local', *,
                executor: Optional[JobExecutor] = None, cores_per_node: Optional[int] = None,
                gpus_per_node: int = 0, start_timeout: Optional[float] = 120.0,
                grace_period: float = DEFAULT_GRACE, **executor_kwargs: Any) -> Instance:
    """Acquire ``allocation`` through ``via`` (or ``executor``) and return the root instance.

    The pool holds ``node_count`` nodes of ``cores_per_node`` cores (default:
    the cores of this machine), or a single node when the allocation runs on
    the local backend. When the allocation ends, every task still pending or
    running fails with ``"allocation ended"``.
    """
    allocation = allocation or default_allocation()
    owns = executor is None
    if executor is None:
        executor = get_executor(via, **executor_kwargs)
    try:
        job = executor.submit(allocation)
        try:
            status = executor.wait(job, {JobState.ACTIVE}, timeout=start_timeout)
        except WaitTimeout:
            executor.cancel(job)
            raise AgentStartFailed(f'allocation not active after {start_timeout} s') from None
        if status.state is not JobState.ACTIVE:
            raise AgentStartFailed(f'allocation {status.state.value}: {status.message or ""}'.strip())
    except BaseException:
        if owns:
            executor.close()
        raise
    nodes = 1 if executor.name == 'local' else allocation.resources.node_count
    cores = cores_per_node or os.cpu_count() or 1
    pool = ResourcePool.uniform(nodes, cores, gpus_per_node)
    pilot = PilotExecutor(pool, allocation=job, via=executor, owns_via=owns,
                          grace_period=grace_period)

    def watch(job_id: str, st: JobStatus) -> None:
        if job_id == job.id and st.is_terminal:
            pilot.end_allocation()

    executor.add_callback(watch)
    if job.state.is_terminal:
        pilot.end_allocation()
    return pilot.root


def pilot_submit(instance: Instance, spec: JobSpec) -> Job:
    return instance.runtime.submit_to(instance, spec)
