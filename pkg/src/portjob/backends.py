"""Registers the bundled backends with the default executor registry."""
from typing import Any

from portjob.batch.executor import BatchExecutor
from portjob.executor import JobExecutor, registry
from portjob.local import LocalExecutor
from portjob.pilot.runtime import PilotExecutor, start_pilot


def _pilot(**kwargs: Any) -> JobExecutor:
    allocation = kwargs.pop('allocation', None)
    via = kwargs.pop('via', 'local')
    return start_pilot(allocation, via, **kwargs).executor


for _descriptor, _factory in ((LocalExecutor.descriptor, LocalExecutor),
                              (BatchExecutor.descriptor, BatchExecutor),
                              (PilotExecutor.descriptor, _pilot)):
    if _descriptor.name not in registry.names():
        registry.register_backend(_descriptor, _factory)
