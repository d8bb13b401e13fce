"""Slow, obviously-correct reference implementations used to check the real code.

Nothing here imports the modules under test except plain data types.
"""
from __future__ import annotations

import itertools
from typing import Dict, List, Optional, Sequence, Tuple

# -- batch scheduling -------------------------------------------------------------


class _Job:
    def __init__(self, jid: int, submit: int, nodes: int, walltime: int, runtime: int) -> None:
        self.id = jid
        self.submit = submit
        self.nodes = nodes
        self.walltime = walltime
        self.runtime = runtime
        self.start: Optional[int] = None
        self.end: Optional[int] = None

    def busy_until(self) -> int:
        """Reserved end used for planning: start + walltime."""
        assert self.start is not None
        return self.start + self.walltime

    def leaves_at(self) -> int:
        assert self.start is not None
        return self.start + min(self.runtime, self.walltime)


def _free_at(total: int, running: List[_Job], s: int) -> int:
    return total - sum(j.nodes for j in running if j.busy_until() > s)


def _pass(t: int, total: int, running: List[_Job], pending: List[_Job], backfill: bool) -> None:
    """One scheduling decision at second ``t``, written out step by step."""
    while pending and pending[0].nodes <= total - sum(j.nodes for j in running):
        job = pending.pop(0)
        job.start = t
        running.append(job)
    if not pending or not backfill:
        return
    head = pending[0]
    # walk forward one second at a time until the head fits
    s = t
    while _free_at(total, running, s) < head.nodes:
        s += 1
    shadow = s
    extra = _free_at(total, running, shadow) - head.nodes
    free = total - sum(j.nodes for j in running)
    for job in list(pending[1:]):
        if job.nodes > free:
            continue
        if t + job.walltime <= shadow:
            ok = True
        elif job.nodes <= extra:
            extra -= job.nodes
            ok = True
        else:
            ok = False
        if ok:
            pending.remove(job)
            job.start = t
            running.append(job)
            free -= job.nodes


def oracle_schedule(total: int, trace: Sequence[Tuple[int, int, int, int]], backfill: bool
                    ) -> Dict[int, Tuple[Optional[int], Optional[int]]]:
    """(start, end) per job id for a trace of (submit, nodes, walltime, runtime).

    Ids are assigned in submission order (stable for equal submit times).
    Every second: finished jobs leave and the queue is rescheduled, then each
    job submitted at that second joins the queue and it is rescheduled again.
    """
    order = sorted(range(len(trace)), key=lambda i: trace[i][0])
    jobs = [_Job(n + 1, *trace[i]) for n, i in enumerate(order)]
    running: List[_Job] = []
    pending: List[_Job] = []
    done: List[_Job] = []
    horizon = max((j.submit for j in jobs), default=0)
    t = 0
    while True:
        leaving = [j for j in running if j.leaves_at() == t]
        for j in leaving:
            running.remove(j)
            j.end = t
            done.append(j)
        if leaving:
            _pass(t, total, running, pending, backfill)
        for j in jobs:
            if j.submit == t:
                if j.nodes > total or j.walltime <= 0:
                    j.end = t
                    done.append(j)
                else:
                    pending.append(j)
                _pass(t, total, running, pending, backfill)
        assert sum(j.nodes for j in running) <= total
        if t >= horizon and not running and not pending:
            break
        t += 1
    return {j.id: (j.start, j.end) for j in jobs}


# -- task placement -----------------------------------------------------------------

Demand = Tuple[int, int, int, int, bool]  # nodes, ppn, cores/proc, gpus/proc, exclusive
Inventory = Sequence[Tuple[int, int, int]]  # node id, cores, gpus
Free = Dict[int, Tuple[frozenset, frozenset]]


def oracle_place(inventory: Inventory, free: Free, pending: Sequence[Demand]
                 ) -> List[Tuple[int, List[Tuple[int, Tuple[int, ...], Tuple[int, ...]]]]]:
    """Exhaustive first fit: for each task in order, the lexicographically first
    node combination that can host it, lowest free indices on each node.

    Returns (task index, [(node, cores, gpus) per process]) for placed tasks.
    """
    free = {n: (set(c), set(g)) for n, (c, g) in free.items()}
    caps = {n: (c, g) for n, c, g in inventory}
    out = []
    for idx, (nodes, ppn, cpp, gpp, exclusive) in enumerate(pending):
        need_c, need_g = ppn * cpp, ppn * gpp

        def hosts(n: int) -> bool:
            c, g = free[n]
            if caps[n][0] < need_c or caps[n][1] < need_g:
                return False
            if exclusive:
                return len(c) == caps[n][0] and len(g) == caps[n][1]
            return len(c) >= need_c and len(g) >= need_g

        chosen = None
        for combo in itertools.combinations(sorted(free), nodes):
            if all(hosts(n) for n in combo):
                chosen = combo
                break
        if chosen is None:
            continue
        ranks = []
        for n in chosen:
            c_pick = next(itertools.combinations(sorted(free[n][0]), need_c))
            g_pick = next(itertools.combinations(sorted(free[n][1]), need_g))
            for p in range(ppn):
                ranks.append((n, c_pick[p * cpp:(p + 1) * cpp], g_pick[p * gpp:(p + 1) * gpp]))
            if exclusive:
                free[n] = (set(), set())
            else:
                free[n] = (free[n][0] - set(c_pick), free[n][1] - set(g_pick))
        out.append((idx, ranks))
    return out
