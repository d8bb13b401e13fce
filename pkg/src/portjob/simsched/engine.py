"""Deterministic batch-scheduling policy over a virtual cluster.

Nodes are interchangeable; a job asks for a node count and a walltime. The
queue is strict FIFO unless EASY backfill is enabled, in which case the
blocked queue head gets a reservation computed from the walltimes of running
jobs and later jobs may start only if they cannot delay it.

Every event triggers a scheduling pass at its instant: each batch of
simultaneous completions, each submission, each cancellation. Completions
are handled before submissions made at the same instant. A pass that follows
another with no event in between starts nothing, so passes compose.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

PEND = 'PEND'
RUN = 'RUN'
DONE = 'DONE'
FAIL = 'FAIL'
KILL = 'KILL'
UNKNOWN = 'UNKNOWN'
FINAL_TOKENS = frozenset({DONE, FAIL, KILL})


@dataclass
class SimJob:
    id: int
    nodes: int
    walltime: float
    runtime: Optional[float] = None  # None: unknown, runs until walltime
    exit_code: int = 0
    submit_time: Optional[float] = None
    start_time: Optional[float] = None
    end_time: Optional[float] = None
    state: str = PEND
    queue: Optional[str] = None
    script: Optional[str] = None

    def horizon(self) -> float:
        assert self.start_time is not None
        return self.start_time + self.walltime

    def completion_time(self) -> Optional[float]:
        """When the job leaves the machine if nothing intervenes."""
        if self.start_time is None:
            return None
        if self.runtime is None or self.runtime > self.walltime:
            return self.start_time + self.walltime
        return self.start_time + self.runtime


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: str  # submit | start | finish | cancel
    job_id: int

    def __str__(self) -> str:
        return f'{self.time:g} {self.kind} {self.job_id}'


class StartDecision(NamedTuple):
    job_id: int
    time: float
    backfilled: bool


class Reservation(NamedTuple):
    job_id: int
    time: float
    extra_nodes: int


@dataclass
class SimCluster:
    total_nodes: int
    node_cores: int = 1
    now: float = 0.0
    running: List[SimJob] = field(default_factory=list)
    pending: List[SimJob] = field(default_factory=list)
    finished: List[SimJob] = field(default_factory=list)
    backfill: bool = False
    next_id: int = 1

    def __post_init__(self) -> None:
        if self.total_nodes < 1 or self.node_cores < 1:
            raise ValueError('cluster needs at least one node and one core per node')

    def used_nodes(self) -> int:
        return sum(j.nodes for j in self.running)

    def free_nodes(self) -> int:
        return self.total_nodes - self.used_nodes()

    def job(self, job_id: int) -> SimJob:
        for j in itertools.chain(self.running, self.pending, self.finished):
            if j.id == job_id:
                return j
        raise KeyError(job_id)


def _shadow(now: float, free: int, horizons: Iterable[Tuple[float, int]],
            need: int) -> Tuple[float, int]:
    """Earliest time ``need`` nodes are free, and the surplus at that time."""
    if free >= need:
        return now, free - need
    avail = free
    for end, group in itertools.groupby(sorted(horizons), key=lambda h: h[0]):
        avail += sum(n for _, n in group)
        if avail >= need:
            return max(end, now), avail - need
    raise ValueError(f'{need} nodes can never become free')


def _plan(cluster: SimCluster, backfill: bool
          ) -> Tuple[List[StartDecision], Optional[Reservation]]:
    now = cluster.now
    free = cluster.free_nodes()
    pending = cluster.pending
    decisions: List[StartDecision] = []
    horizons = [(max(j.horizon(), now), j.nodes) for j in cluster.running]
    i = 0
    while i < len(pending) and pending[i].nodes <= free:
        job = pending[i]
        decisions.append(StartDecision(job.id, now, False))
        horizons.append((now + job.walltime, job.nodes))
        free -= job.nodes
        i += 1
    if i >= len(pending):
        return decisions, None
    head = pending[i]
    shadow, extra = _shadow(now, free, horizons, head.nodes)
    reservation = Reservation(head.id, shadow, extra)
    if not backfill:
        return decisions, reservation
    for job in pending[i + 1:]:
        if job.nodes > free:
            continue
        if now + job.walltime <= shadow:
            pass
        elif job.nodes <= extra:
            extra -= job.nodes
        else:
            continue
        decisions.append(StartDecision(job.id, now, True))
        free -= job.nodes
    return decisions, reservation


def schedule_step(cluster: SimCluster, backfill: Optional[bool] = None) -> List[StartDecision]:
    """Jobs that should start at ``cluster.now``. Does not modify ``cluster``."""
    return _plan(cluster, cluster.backfill if backfill is None else backfill)[0]


def head_reservation(cluster: SimCluster) -> Optional[Reservation]:
    """Reservation the blocked queue head would get after this step's FIFO starts."""
    return _plan(cluster, False)[1]


def apply_starts(cluster: SimCluster, decisions: Sequence[StartDecision]) -> List[SimEvent]:
    by_id = {j.id: j for j in cluster.pending}
    events = []
    for d in decisions:
        job = by_id[d.job_id]
        cluster.pending.remove(job)
        job.state = RUN
        job.start_time = d.time
        cluster.running.append(job)
        events.append(SimEvent(d.time, 'start', job.id))
    return events


def _schedule(cluster: SimCluster) -> List[SimEvent]:
    return apply_starts(cluster, schedule_step(cluster))


def submit(cluster: SimCluster, nodes: int, walltime: float, runtime: Optional[float] = None,
           exit_code: int = 0, queue: Optional[str] = None,
           script: Optional[str] = None) -> Tuple[SimJob, List[SimEvent]]:
    """Enqueue a job at ``cluster.now``. Scheduling happens on the next :func:`advance`.

    Jobs that can never fit the cluster fail immediately.
    """
    job = SimJob(cluster.next_id, nodes, walltime, runtime, exit_code,
                 submit_time=cluster.now, queue=queue, script=script)
    cluster.next_id += 1
    events = [SimEvent(cluster.now, 'submit', job.id)]
    if nodes < 1 or nodes > cluster.total_nodes or walltime <= 0:
        job.state = FAIL
        job.end_time = cluster.now
        cluster.finished.append(job)
        events.append(SimEvent(cluster.now, 'finish', job.id))
    else:
        cluster.pending.append(job)
    return job, events


def _finish(cluster: SimCluster, job: SimJob, when: float) -> SimEvent:
    cluster.running.remove(job)
    if job.runtime is None or job.runtime > job.walltime:
        job.state = KILL
    else:
        job.state = DONE if job.exit_code == 0 else FAIL
    job.end_time = when
    cluster.finished.append(job)
    return SimEvent(when, 'finish', job.id)


def advance(cluster: SimCluster, to_time: float) -> List[SimEvent]:
    """Run the cluster forward to ``to_time``, returning the events emitted."""
    if to_time < cluster.now:
        raise ValueError(f'cannot go back in time ({to_time} < {cluster.now})')
    events = _schedule(cluster)
    while cluster.running:
        t = min(j.completion_time() for j in cluster.running)  # type: ignore[type-var]
        if t > to_time:
            break
        cluster.now = t
        done = sorted((j for j in cluster.running if j.completion_time() == t), key=lambda j: j.id)
        for job in done:
            events.append(_finish(cluster, job, t))
        events.extend(_schedule(cluster))
    cluster.now = to_time
    return events


def cancel(cluster: SimCluster, job_id: int) -> List[SimEvent]:
    """Kill a pending or running job at ``cluster.now``; finished jobs are left alone."""
    job = cluster.job(job_id)
    if job.state in FINAL_TOKENS:
        return []
    if job.state == PEND:
        cluster.pending.remove(job)
    else:
        cluster.running.remove(job)
    job.state = KILL
    job.end_time = cluster.now
    cluster.finished.append(job)
    return [SimEvent(cluster.now, 'cancel', job.id)] + _schedule(cluster)


def run_until_idle(cluster: SimCluster) -> List[SimEvent]:
    events = _schedule(cluster)
    while cluster.running:
        t = min(j.completion_time() for j in cluster.running)  # type: ignore[type-var]
        events.extend(advance(cluster, t))
    return events


class TraceJob(NamedTuple):
    submit_time: float
    nodes: int
    walltime: float
    runtime: float
    exit_code: int = 0


def simulate(total_nodes: int, trace: Sequence[TraceJob], backfill: bool = False
             ) -> Tuple[SimCluster, List[SimEvent]]:
    """Replay a submission trace to completion.

    Job ids follow submission order; jobs submitted at the same instant keep
    their trace order.
    """
    cluster = SimCluster(total_nodes, backfill=backfill)
    events: List[SimEvent] = []
    for item in sorted(trace, key=lambda t: t.submit_time):
        events.extend(advance(cluster, item.submit_time))
        events.extend(submit(cluster, item.nodes, item.walltime, item.runtime, item.exit_code)[1])
    events.extend(run_until_idle(cluster))
    return cluster, events


def format_events(events: Iterable[SimEvent]) -> str:
    return ''.join(f'{e}\n' for e in events)


def start_times(cluster: SimCluster) -> Dict[int, Tuple[Optional[float], Optional[float]]]:
    return {j.id: (j.start_time, j.end_time)
            for j in itertools.chain(cluster.running, cluster.pending, cluster.finished)}
