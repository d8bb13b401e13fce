"""Pilot runtime: many small tasks scheduled inside one allocation, optionally nested."""
from portjob.pilot.instance import (InsufficientFreeNodes, Instance, OversizedTask, Task,
                                    distribute, spawn_child)
from portjob.pilot.pool import (NodeFree, NodeInventory, OversubscriptionError, Rank,
                                ResourcePool, Slot, place, schedule_tasks)
from portjob.pilot.runtime import (ALLOCATION_ENDED, AgentStartFailed, PilotExecutor,
                                   default_allocation, pilot_submit, start_pilot)

__all__ = [
    'ALLOCATION_ENDED', 'AgentStartFailed', 'InsufficientFreeNodes', 'Instance', 'NodeFree',
    'NodeInventory', 'OversizedTask', 'OversubscriptionError', 'PilotExecutor', 'Rank',
    'ResourcePool', 'Slot', 'Task', 'default_allocation', 'distribute', 'pilot_submit', 'place',
    'schedule_tasks', 'spawn_child', 'start_pilot',
]
