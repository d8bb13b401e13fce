"""Workloads and hierarchy drivers shared by the pilot and acceptance tests."""
import random
from collections import Counter
from typing import List

from portjob.model import JobSpec, JobState, ResourceSpec
from portjob.pilot import Instance, InsufficientFreeNodes, PilotExecutor, ResourcePool, spawn_child


def task(cores=1, nodes=1, ppn=1, exclusive=False, argv=('/bin/true',)):
    launcher = 'single' if nodes * ppn == 1 else 'multiple'
    return JobSpec(argv[0], list(argv[1:]), launcher=launcher,
                   resources=ResourceSpec(node_count=nodes, processes_per_node=ppn,
                                          cpu_cores_per_process=cores, exclusive=exclusive))


def mixed_workload(n: int, seed: int) -> List[JobSpec]:
    """Small heterogeneous tasks with known outcomes: some fail, one kind never fits."""
    rng = random.Random(seed)
    specs = []
    for i in range(n):
        kind = rng.random()
        if kind < 0.05:
            specs.append(task(cores=64))  # larger than any node
        elif kind < 0.2:
            specs.append(task(argv=('/bin/false',)))
        elif kind < 0.3:
            specs.append(task(ppn=2, cores=rng.randint(1, 2)))
        else:
            specs.append(task(cores=rng.randint(1, 4)))
    return specs


def run_workload(pilot: PilotExecutor, specs: List[JobSpec], timeout: float = 120) -> Counter:
    """Submit ``specs``, wait for all of them, return the multiset of (index, state)."""
    from portjob.executor import SubmitFailed

    jobs = []
    for spec in specs:
        try:
            jobs.append(pilot.submit(spec))
        except SubmitFailed as e:
            jobs.append(e.job)
    outcome = Counter()
    for i, job in enumerate(jobs):
        state = pilot.wait(job, timeout=timeout).state
        outcome[(i, state)] += 1
    return outcome


def random_hierarchy(rng: random.Random, root: Instance, steps: int = 6) -> List[Instance]:
    """Spawn children at random places in the tree, checking invariants after each spawn."""
    spawned = []
    for _ in range(steps):
        target = rng.choice(root.walk())
        idle = target.pool.idle_nodes()
        if not idle:
            continue
        choice = rng.random()
        try:
            if choice < 0.3:
                kids = spawn_child(target, None, rng.randint(1, 3))
            elif choice < 0.6:
                kids = spawn_child(target, rng.randint(1, len(idle)), rng.randint(1, 2))
            else:
                picked = rng.sample(idle, rng.randint(1, len(idle)))
                kids = spawn_child(target, picked, rng.randint(1, len(picked)))
        except InsufficientFreeNodes:
            continue
        spawned.extend(kids)
        root.check_invariants()
    return spawned


def terminal_states(outcome: Counter) -> Counter:
    return Counter({state: n for (_, state), n in outcome.items()})


def pilot_on(nodes: int, cores: int, **kw) -> PilotExecutor:
    return PilotExecutor(ResourcePool.uniform(nodes, cores), grace_period=1.0, **kw)


__all__ = ['task', 'mixed_workload', 'run_workload', 'random_hierarchy', 'terminal_states',
           'pilot_on', 'JobState']
