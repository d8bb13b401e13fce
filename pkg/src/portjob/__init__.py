"""Portable job submission across local machines, batch schedulers and pilots."""
from portjob.model import (Job, JobAttributes, JobSpec, JobState, JobStatus, Launcher,
                           ResourceSpec, apply_status, load_spec, transition_allowed,
                           validate_spec)
from portjob.executor import JobExecutor, get_executor

__version__ = '0.1.0'

__all__ = [
    'Job', 'JobAttributes', 'JobExecutor', 'JobSpec', 'JobState', 'JobStatus', 'Launcher', 'ResourceSpec',
    'apply_status', 'get_executor', 'load_spec', 'transition_allowed', 'validate_spec',
]
