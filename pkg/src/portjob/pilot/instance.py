"""Scheduler instances: task queues over a resource pool, nestable over node partitions."""
from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Sequence, Union

from portjob.executor import ExecutorError, SubmitFailed
from portjob.local import ProcessGroup
from portjob.model import Job, JobState, JobStatus, ResourceSpec
from portjob.pilot.pool import OversubscriptionError, ResourcePool, Slot, schedule_tasks

if TYPE_CHECKING:
    from portjob.pilot.runtime import PilotExecutor


class InsufficientFreeNodes(ExecutorError):
    pass


class OversizedTask(SubmitFailed):
    """The task can never fit the pool of the instance it was submitted to."""


@dataclass(eq=False)
class Task:
    job: Job
    instance: Optional['Instance'] = None
    slot: Optional[Slot] = None
    group: Optional[ProcessGroup] = None
    drained: Optional[str] = None

    @property
    def id(self) -> str:
        return self.job.id

    @property
    def resources(self) -> ResourceSpec:
        return self.job.spec.resources


NodeSelector = Union[None, int, Iterable[int]]


class Instance:
    """One scheduler in a (possibly nested) hierarchy.

    A leaf instance places its own tasks with :func:`schedule_tasks`. Once an
    instance has children, new work is handed to them with :func:`distribute`.
    All scheduling decisions of an instance happen under its lock; task
    completions re-enter through :meth:`task_finished`.
    """

    def __init__(self, pool: ResourcePool, runtime: 'PilotExecutor', *,
                 parent: Optional['Instance'] = None, id: str = 'root') -> None:
        self.id = id
        self.pool = pool
        self.runtime = runtime
        self.parent = parent
        self.children: List[Instance] = []
        self.pending: 'OrderedDict[str, Task]' = OrderedDict()
        self.running: Dict[str, Task] = {}
        self.decisions = 0
        self.ended: Optional[str] = None
        self._lock = threading.RLock()
        self._cursor = 0

    def __repr__(self) -> str:
        return f'Instance({self.id!r}, nodes={self.pool.node_ids()})'

    @property
    def executor(self) -> 'PilotExecutor':
        return self.runtime

    @property
    def depth(self) -> int:
        return 0 if self.parent is None else self.parent.depth + 1

    def walk(self) -> List['Instance']:
        """This instance and all descendants, parents before children."""
        out = [self]
        for child in self.children:
            out.extend(child.walk())
        return out

    def leaves(self) -> List['Instance']:
        return [i for i in self.walk() if not i.children]

    # -- submission ---------------------------------------------------------------

    def submit(self, task: Task) -> Optional[str]:
        """Enqueue ``task`` here or with a child. Returns an error message if it failed."""
        with self._lock:
            if self.ended is not None:
                return self._reject(task, self.ended)
            if self.children:
                distribute(self, [task])
                return task.job.status.message if task.job.state is JobState.FAILED else None
            req = task.job.spec.resources
            if not self.pool.can_ever_fit(req):
                return self._reject(task, f'task demand exceeds the capacity of instance {self.id}')
            task.instance = self
            self.pending[task.id] = task
            self.runtime.report(task, JobStatus(JobState.QUEUED))
            self._schedule()
            return None

    def _reject(self, task: Task, message: str) -> str:
        self.runtime.report(task, JobStatus(JobState.FAILED, message=message))
        return message

    def _schedule(self) -> None:
        while self.ended is None and self.pending:
            placements = schedule_tasks(self.pool, self.pending.values())
            if not placements:
                return
            retry = False
            for task, slot in placements:
                self.pool.allocate(slot)
                self.decisions += 1
                del self.pending[task.id]
                task.slot = slot
                self.running[task.id] = task
                error = self.runtime.launch(task)
                if error is not None:
                    del self.running[task.id]
                    self.pool.release(slot)
                    self.runtime.report(task, JobStatus(JobState.FAILED, message=error))
                    retry = True
            if not retry:
                return

    def task_finished(self, task: Task, status: JobStatus) -> None:
        with self._lock:
            if self.running.pop(task.id, None) is not None and task.slot is not None:
                self.pool.release(task.slot)
            if task.drained is not None:
                status = JobStatus(JobState.FAILED, message=task.drained)
            self.runtime.report(task, status)
            self._schedule()

    def cancel(self, task: Task, grace: float) -> None:
        with self._lock:
            if self.pending.pop(task.id, None) is not None:
                self.runtime.report(task, JobStatus(JobState.CANCELED, message='canceled'))
                return
            group = task.group if task.id in self.running else None
        if group is not None:
            group.terminate(grace)

    def drain(self, message: str) -> None:
        """Stop scheduling: pending tasks fail now, running tasks are killed and fail."""
        with self._lock:
            if self.ended is not None:
                return
            self.ended = message
            pending = list(self.pending.values())
            self.pending.clear()
            running = list(self.running.values())
            for task in running:
                task.drained = message
            children = list(self.children)
        for task in pending:
            self.runtime.report(task, JobStatus(JobState.FAILED, message=message))
        for task in running:
            if task.group is not None:
                task.group.kill()
        for child in children:
            child.drain(message)

    # -- hierarchy ----------------------------------------------------------------

    def spawn_child(self, nodes: NodeSelector = None, k: int = 1) -> List['Instance']:
        return spawn_child(self, nodes, k)

    def check_invariants(self) -> None:
        """Raise ``AssertionError`` if this subtree breaks a pool or partition invariant."""
        with self._lock:
            self.pool.check()
            own = set(self.pool.nodes)
            seen: set = set()
            for child in self.children:
                nodes = set(child.pool.nodes)
                if not nodes <= own:
                    raise AssertionError(f'{child.id} holds nodes outside {self.id}')
                ids = {n.id for n in nodes}
                if ids & seen:
                    raise AssertionError(f'{child.id} overlaps a sibling')
                seen |= ids
            if seen != set(self.pool.granted):
                raise AssertionError(f'{self.id}: granted nodes differ from children pools')
            for task in self.running.values():
                if task.slot is not None and set(task.slot.nodes()) & seen:
                    raise AssertionError(f'{self.id}: task {task.id} runs on a granted node')
            children = list(self.children)
        for child in children:
            child.check_invariants()


def _partition(nodes: Sequence[int], k: int) -> List[List[int]]:
    base, extra = divmod(len(nodes), k)
    out, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        out.append(list(nodes[start:start + size]))
        start += size
    return out


def spawn_child(parent: Instance, nodes: NodeSelector = None, k: int = 1) -> List[Instance]:
    """Create ``k`` children of ``parent`` over a whole-node partition of ``nodes``.

    ``nodes`` is ``None`` (every idle node), a count (the lowest idle nodes),
    or explicit node ids. Earlier children receive the extra nodes when the
    selection does not split evenly. Pending tasks of ``parent`` stay with it
    while its remaining nodes could still host them; the rest are handed to
    the new children.
    """
    with parent._lock:
        if parent.ended is not None:
            raise InsufficientFreeNodes(f'instance {parent.id} has ended')
        idle = sorted(parent.pool.idle_nodes())
        if nodes is None:
            selected = idle
        elif isinstance(nodes, int):
            if nodes > len(idle):
                raise InsufficientFreeNodes(f'{nodes} nodes requested, {len(idle)} idle')
            selected = idle[:nodes]
        else:
            selected = sorted(set(nodes))
            busy = [n for n in selected if n not in idle]
            if busy:
                raise InsufficientFreeNodes(f'nodes {busy} are not idle in {parent.id}')
        if k < 1 or len(selected) < k:
            raise InsufficientFreeNodes(f'cannot split {len(selected)} nodes into {k} children')
        by_id = {n.id: n for n in parent.pool.nodes}
        parent.pool.grant(selected)
        children = []
        for part in _partition(selected, k):
            child = Instance(ResourcePool(by_id[i] for i in part), parent.runtime, parent=parent,
                             id=f'{parent.id}.{len(parent.children)}')
            parent.children.append(child)
            children.append(child)
        orphans = [t for t in parent.pending.values() if not parent.pool.can_ever_fit(t.resources)]
        for task in orphans:
            del parent.pending[task.id]
        if orphans:
            distribute(parent, orphans)
        return children


def distribute(parent: Instance, tasks: Iterable[Task]) -> Dict[str, List[Task]]:
    """Hand ``tasks`` to the children of ``parent`` round-robin, in creation order.

    Children that could never fit a task are skipped for it; a task no child
    fits is failed. Returns the assignment per child id.
    """
    assignment: Dict[str, List[Task]] = {}
    with parent._lock:
        children = list(parent.children)
        if not children:
            raise ValueError(f'instance {parent.id} has no children')
        for task in tasks:
            req = task.job.spec.resources
            chosen = None
            for offset in range(len(children)):
                idx = (parent._cursor + offset) % len(children)
                if children[idx].pool.can_ever_fit(req, include_granted=True):
                    chosen = idx
                    break
            if chosen is None:
                parent._reject(task, 'no child instance can fit the task')
                continue
            parent._cursor = (chosen + 1) % len(children)
            child = children[chosen]
            assignment.setdefault(child.id, []).append(task)
            child.submit(task)
    return assignment


__all__ = ['Instance', 'Task', 'InsufficientFreeNodes', 'OversizedTask', 'OversubscriptionError',
           'spawn_child', 'distribute']
