"""Resource inventory of a pilot instance and first-fit task placement."""
from __future__ import annotations

from dataclasses import dataclass
from typing import (Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence,
                    Tuple, TypeVar)

from portjob.model import ResourceSpec

T = TypeVar('T')


class OversubscriptionError(AssertionError):
    """A slot was allocated on resources that were not free. Always a bug."""


@dataclass(frozen=True)
class NodeInventory:
    id: int
    cores: int
    gpus: int = 0


@dataclass(frozen=True)
class NodeFree:
    cores: FrozenSet[int]
    gpus: FrozenSet[int]


@dataclass(frozen=True)
class Rank:
    """Resources bound to one process of a task."""

    node: int
    cores: Tuple[int, ...]
    gpus: Tuple[int, ...] = ()

    def environment(self) -> Dict[str, str]:
        return {
            'PORTJOB_NODE': str(self.node),
            'PORTJOB_CORES': ','.join(map(str, self.cores)),
            'PORTJOB_GPUS': ','.join(map(str, self.gpus)),
        }


@dataclass(frozen=True)
class Slot:
    """Where a task runs: one :class:`Rank` per process.

    ``held`` lists what the task keeps busy per node. It equals the union of
    the ranks, except for exclusive tasks, which hold their nodes entirely.
    """

    ranks: Tuple[Rank, ...]
    held: Tuple[Rank, ...]

    def nodes(self) -> List[int]:
        return [h.node for h in self.held]


FreeState = Mapping[int, NodeFree]


def _demand(item: object) -> ResourceSpec:
    if isinstance(item, ResourceSpec):
        return item
    spec = getattr(item, 'spec', None)
    if spec is not None:
        return spec.resources
    return getattr(item, 'resources')


def node_fits(req: ResourceSpec, inv: NodeInventory, free: NodeFree) -> bool:
    cores = req.processes_per_node * req.cpu_cores_per_process
    gpus = req.processes_per_node * req.gpu_cores_per_process
    if inv.cores < cores or inv.gpus < gpus:
        return False
    if req.exclusive:
        return len(free.cores) == inv.cores and len(free.gpus) == inv.gpus
    return len(free.cores) >= cores and len(free.gpus) >= gpus


def place(req: ResourceSpec, inventory: Sequence[NodeInventory], free: FreeState) -> Optional[Slot]:
    """First-fit placement of one task, lowest node ids and lowest indices first."""
    chosen = [inv for inv in inventory if inv.id in free and node_fits(req, inv, free[inv.id])]
    if len(chosen) < req.node_count:
        return None
    ranks: List[Rank] = []
    held: List[Rank] = []
    cpp, gpp = req.cpu_cores_per_process, req.gpu_cores_per_process
    for inv in chosen[:req.node_count]:
        cores = sorted(free[inv.id].cores)
        gpus = sorted(free[inv.id].gpus)
        for p in range(req.processes_per_node):
            ranks.append(Rank(inv.id, tuple(cores[p * cpp:(p + 1) * cpp]),
                              tuple(gpus[p * gpp:(p + 1) * gpp])))
        if req.exclusive:
            held.append(Rank(inv.id, tuple(cores), tuple(gpus)))
        else:
            n = req.processes_per_node
            held.append(Rank(inv.id, tuple(cores[:n * cpp]), tuple(gpus[:n * gpp])))
    return Slot(tuple(ranks), tuple(held))


def _take(free: Dict[int, NodeFree], slot: Slot) -> None:
    for h in slot.held:
        f = free[h.node]
        free[h.node] = NodeFree(f.cores - set(h.cores), f.gpus - set(h.gpus))


def schedule_tasks(pool: 'ResourcePool', pending: Iterable[T],
                   demand: Callable[[T], ResourceSpec] = _demand) -> List[Tuple[T, Slot]]:
    """Greedy FIFO first-fit over ``pending``. Pure: ``pool`` is not modified.

    Tasks that do not fit the current free state are skipped rather than
    blocking the tasks behind them.
    """
    free = dict(pool.free_state())
    inventory = pool.own_nodes()
    placements: List[Tuple[T, Slot]] = []
    for task in pending:
        if not any(f.cores for f in free.values()):
            break  # every task needs at least one core
        slot = place(demand(task), inventory, free)
        if slot is not None:
            placements.append((task, slot))
            _take(free, slot)
    return placements


class ResourcePool:
    """Nodes owned by an instance, their free cores/gpus, and nodes granted to children."""

    def __init__(self, nodes: Iterable[NodeInventory]) -> None:
        self.nodes: Tuple[NodeInventory, ...] = tuple(sorted(nodes, key=lambda n: n.id))
        if len({n.id for n in self.nodes}) != len(self.nodes):
            raise ValueError('duplicate node ids')
        self._by_id = {n.id: n for n in self.nodes}
        self._free: Dict[int, NodeFree] = {
            n.id: NodeFree(frozenset(range(n.cores)), frozenset(range(n.gpus))) for n in self.nodes}
        self.granted: FrozenSet[int] = frozenset()

    @classmethod
    def uniform(cls, count: int, cores: int, gpus: int = 0, first_id: int = 0) -> 'ResourcePool':
        return cls(NodeInventory(first_id + i, cores, gpus) for i in range(count))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ResourcePool):
            return NotImplemented
        return self.nodes == other.nodes

    def __hash__(self) -> int:
        return hash(self.nodes)

    def __repr__(self) -> str:
        return f'ResourcePool({[n.id for n in self.nodes]})'

    def node_ids(self) -> List[int]:
        return [n.id for n in self.nodes]

    def own_nodes(self) -> List[NodeInventory]:
        return [n for n in self.nodes if n.id not in self.granted]

    def free_state(self) -> Dict[int, NodeFree]:
        """Free resources on nodes this instance has not granted to children."""
        return {i: f for i, f in self._free.items() if i not in self.granted}

    def idle_nodes(self) -> List[int]:
        return [n.id for n in self.own_nodes()
                if len(self._free[n.id].cores) == n.cores and len(self._free[n.id].gpus) == n.gpus]

    def can_ever_fit(self, req: ResourceSpec, *, include_granted: bool = False) -> bool:
        """Whether ``req`` fits this pool when nothing is running."""
        nodes = self.nodes if include_granted else self.own_nodes()
        empty = {n.id: NodeFree(frozenset(range(n.cores)), frozenset(range(n.gpus)))
                 for n in nodes}
        return place(req, nodes, empty) is not None

    def allocate(self, slot: Slot) -> None:
        for h in slot.held:
            f = self._free.get(h.node)
            if (f is None or h.node in self.granted or not set(h.cores) <= f.cores
                    or not set(h.gpus) <= f.gpus):
                raise OversubscriptionError(f'slot {h} is not free in {self!r}')
        _take(self._free, slot)

    def release(self, slot: Slot) -> None:
        for h in slot.held:
            f = self._free[h.node]
            if set(h.cores) & f.cores or set(h.gpus) & f.gpus:
                raise OversubscriptionError(f'releasing {h} which is already free')
            self._free[h.node] = NodeFree(f.cores | set(h.cores), f.gpus | set(h.gpus))

    def grant(self, node_ids: Iterable[int]) -> None:
        self.granted = self.granted | frozenset(node_ids)

    def used(self) -> Dict[int, Tuple[int, int]]:
        """Busy (cores, gpus) per node."""
        return {n.id: (n.cores - len(self._free[n.id].cores), n.gpus - len(self._free[n.id].gpus))
                for n in self.nodes}

    def check(self) -> None:
        """Raise :class:`OversubscriptionError` if any node is over- or under-committed."""
        for n in self.nodes:
            f = self._free[n.id]
            if not (f.cores <= frozenset(range(n.cores)) and f.gpus <= frozenset(range(n.gpus))):
                raise OversubscriptionError(f'node {n.id}: free set outside inventory')
