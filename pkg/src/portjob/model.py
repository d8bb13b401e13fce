"""Job description, resource requirements and the job lifecycle state machine.

Everything here is a plain value except :class:`Job`, whose status history
grows through :func:`apply_status`. Callers that share a ``Job`` between
threads must serialize calls to :func:`apply_status` themselves.
"""
from __future__ import annotations

import enum
import json
import time
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union


class Launcher(str, enum.Enum):
    SINGLE = 'single'
    MULTIPLE = 'multiple'
    MPI_LIKE = 'mpi_like'


class JobState(str, enum.Enum):
    NEW = 'NEW'
    QUEUED = 'QUEUED'
    ACTIVE = 'ACTIVE'
    COMPLETED = 'COMPLETED'
    FAILED = 'FAILED'
    CANCELED = 'CANCELED'

    @property
    def is_terminal(self) -> bool:
        return self in TERMINAL_STATES

    def __str__(self) -> str:
        return self.value


TERMINAL_STATES = frozenset({JobState.COMPLETED, JobState.FAILED, JobState.CANCELED})

LEGAL_TRANSITIONS: Tuple[Tuple[JobState, JobState], ...] = (
    (JobState.NEW, JobState.QUEUED),
    (JobState.NEW, JobState.FAILED),
    (JobState.QUEUED, JobState.ACTIVE),
    (JobState.QUEUED, JobState.CANCELED),
    (JobState.QUEUED, JobState.FAILED),
    (JobState.ACTIVE, JobState.COMPLETED),
    (JobState.ACTIVE, JobState.FAILED),
    (JobState.ACTIVE, JobState.CANCELED),
)
_LEGAL = frozenset(LEGAL_TRANSITIONS)


class IllegalTransition(Exception):
    def __init__(self, from_state: JobState, to_state: JobState) -> None:
        super().__init__(f'illegal transition {from_state} -> {to_state}')
        self.from_state = from_state
        self.to_state = to_state


class SpecFormatError(ValueError):
    """Raised when a job spec document does not parse strictly."""


@dataclass(frozen=True)
class ResourceSpec:
    node_count: int = 1
    processes_per_node: int = 1
    cpu_cores_per_process: int = 1
    gpu_cores_per_process: int = 0
    exclusive: bool = False

    def total_processes(self) -> int:
        return self.node_count * self.processes_per_node

    def total_cores(self) -> int:
        return self.total_processes() * self.cpu_cores_per_process

    def total_gpus(self) -> int:
        return self.total_processes() * self.gpu_cores_per_process


@dataclass(frozen=True)
class JobAttributes:
    wall_time: float = 3600.0
    queue_name: Optional[str] = None
    account: Optional[str] = None
    custom: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class JobSpec:
    executable: str
    arguments: Sequence[str] = ()
    environment: Mapping[str, str] = field(default_factory=dict)
    directory: Optional[str] = None
    stdin_path: Optional[str] = None
    stdout_path: Optional[str] = None
    stderr_path: Optional[str] = None
    resources: ResourceSpec = field(default_factory=ResourceSpec)
    attributes: JobAttributes = field(default_factory=JobAttributes)
    launcher: str = Launcher.SINGLE.value

    def __post_init__(self) -> None:
        # normalize containers so equal specs compare (and hash-compare) equal
        object.__setattr__(self, 'arguments', tuple(self.arguments))
        object.__setattr__(self, 'environment', dict(self.environment))
        if isinstance(self.launcher, Launcher):
            object.__setattr__(self, 'launcher', self.launcher.value)

    def with_(self, **changes: Any) -> 'JobSpec':
        return replace(self, **changes)


@dataclass(frozen=True)
class JobStatus:
    state: JobState
    timestamp: float = field(default_factory=time.monotonic)
    exit_code: Optional[int] = None
    message: Optional[str] = None

    def __post_init__(self) -> None:
        state = JobState(self.state)
        object.__setattr__(self, 'state', state)
        if self.exit_code is not None and state not in (JobState.COMPLETED, JobState.FAILED):
            raise ValueError(f'exit_code is only meaningful for COMPLETED/FAILED, not {state}')
        if state is JobState.COMPLETED and self.exit_code != 0:
            raise ValueError('COMPLETED requires exit_code 0')

    @property
    def is_terminal(self) -> bool:
        return self.state.is_terminal


def _new_id() -> str:
    return uuid.uuid4().hex[:16]


@dataclass
class Job:
    """A job as seen by a client.

    ``id`` is assigned at construction and never changes; ``native_id`` is
    filled in by the backend that accepts the job (or by ``attach``).
    """

    spec: JobSpec
    id: str = field(default_factory=_new_id)
    native_id: Optional[str] = None
    status_history: List[JobStatus] = field(default_factory=lambda: [JobStatus(JobState.NEW)])

    @property
    def status(self) -> JobStatus:
        return self.status_history[-1]

    @property
    def state(self) -> JobState:
        return self.status_history[-1].state

    def states(self) -> List[JobState]:
        return [s.state for s in self.status_history]


def transition_allowed(from_state: JobState, to_state: JobState) -> bool:
    return (from_state, to_state) in _LEGAL


def _same_terminal(a: JobStatus, b: JobStatus) -> bool:
    return a.state == b.state and a.exit_code == b.exit_code


def apply_status(job: Job, status: JobStatus) -> Job:
    """Append ``status`` to the job's history if the transition is legal.

    A repeated delivery of the terminal status the job already holds is
    dropped silently. Anything else that is not a legal transition raises
    :class:`IllegalTransition`.
    """
    current = job.status
    if current.is_terminal and _same_terminal(current, status):
        return job
    if not transition_allowed(current.state, status.state):
        raise IllegalTransition(current.state, status.state)
    job.status_history.append(status)
    return job


def path_to(current: JobState, target: JobState, *,
            has_exit_code: bool = False) -> List[JobState]:
    """Chain of legal states leading from ``current`` to ``target``.

    Backends that observe a job only intermittently (pollers, attach) use
    this to synthesize the states they missed. A failure that carries a
    process exit code is routed through ``ACTIVE``, since a process must
    have run to produce one. A direct legal edge is preferred otherwise.
    Returns ``[]`` when ``target`` is unreachable or already current.
    """
    if current == target or current.is_terminal:
        return []
    if transition_allowed(current, target) and not (target is JobState.FAILED and has_exit_code
                                                    and current is not JobState.ACTIVE):
        return [target]
    route = _CANONICAL_ROUTES[target]
    if target is JobState.FAILED and has_exit_code:
        route = [JobState.QUEUED, JobState.ACTIVE, JobState.FAILED]
    if current is JobState.NEW:
        return list(route)
    if current in route:
        return route[route.index(current) + 1:]
    return [target] if transition_allowed(current, target) else []


_CANONICAL_ROUTES = {
    JobState.NEW: [],
    JobState.QUEUED: [JobState.QUEUED],
    JobState.ACTIVE: [JobState.QUEUED, JobState.ACTIVE],
    JobState.COMPLETED: [JobState.QUEUED, JobState.ACTIVE, JobState.COMPLETED],
    JobState.FAILED: [JobState.QUEUED, JobState.FAILED],
    JobState.CANCELED: [JobState.QUEUED, JobState.CANCELED],
}


def validate_spec(spec: JobSpec, *, allow_zero_wall_time: bool = False) -> List[str]:
    """Return every invariant violation of ``spec``; empty means valid.

    Pilot tasks may carry ``wall_time == 0`` (no limit) when
    ``allow_zero_wall_time`` is set; batch jobs never may.
    """
    errors: List[str] = []
    if not isinstance(spec.executable, str) or not spec.executable:
        errors.append('executable must be non-empty')
    r = spec.resources
    for name in ('node_count', 'processes_per_node', 'cpu_cores_per_process'):
        value = getattr(r, name)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            errors.append(f'{name} must be ≥ 1')
    gpus = r.gpu_cores_per_process
    if not isinstance(gpus, int) or isinstance(gpus, bool) or gpus < 0:
        errors.append('gpu_cores_per_process must be ≥ 0')
    wall = spec.attributes.wall_time
    if not isinstance(wall, (int, float)) or isinstance(wall, bool):
        errors.append('wall_time must be a number of seconds')
    elif wall < 0 or (wall == 0 and not allow_zero_wall_time):
        errors.append('wall_time must be > 0')
    counts_ok = not any(e.startswith(('node_count', 'processes_per_node')) for e in errors)
    if spec.launcher == Launcher.SINGLE.value and counts_ok and r.total_processes() != 1:
        errors.append(f"launcher 'single' requires exactly one process, "
                      f'got {r.total_processes()}')
    return errors


# -- canonical JSON format ---------------------------------------------------

_TOP_KEYS = ('executable', 'arguments', 'environment', 'directory', 'stdin_path',
             'stdout_path', 'stderr_path', 'resources', 'attributes', 'launcher')
_RESOURCE_KEYS = ('node_count', 'processes_per_node', 'cpu_cores_per_process',
                  'gpu_cores_per_process', 'exclusive')
_ATTRIBUTE_KEYS = ('wall_time_s', 'queue_name', 'account', 'custom')


def _no_duplicates(pairs: List[Tuple[str, Any]]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for k, v in pairs:
        if k in out:
            raise SpecFormatError(f'duplicate key {k!r}')
        out[k] = v
    return out


def _check_keys(obj: Any, allowed: Sequence[str], where: str) -> Dict[str, Any]:
    if not isinstance(obj, dict):
        raise SpecFormatError(f'{where} must be an object')
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise SpecFormatError(f'unknown key(s) in {where}: {", ".join(unknown)}')
    return obj


def _opt_str(obj: Dict[str, Any], key: str, where: str) -> Optional[str]:
    value = obj.get(key)
    if value is not None and not isinstance(value, str):
        raise SpecFormatError(f'{where}.{key} must be a string or null')
    return value


def _int(obj: Dict[str, Any], key: str, default: int) -> int:
    value = obj.get(key, default)
    if not isinstance(value, int) or isinstance(value, bool):
        raise SpecFormatError(f'resources.{key} must be an integer')
    return value


def _str_map(value: Any, where: str) -> Dict[str, str]:
    if not isinstance(value, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in value.items()):
        raise SpecFormatError(f'{where} must map strings to strings')
    return dict(value)


def spec_from_dict(doc: Any) -> JobSpec:
    """Build a :class:`JobSpec` from its canonical document, rejecting unknown keys."""
    doc = _check_keys(doc, _TOP_KEYS, 'spec')
    if 'executable' not in doc or not isinstance(doc['executable'], str):
        raise SpecFormatError('spec.executable is required and must be a string')
    args = doc.get('arguments', [])
    if not isinstance(args, list) or not all(isinstance(a, str) for a in args):
        raise SpecFormatError('spec.arguments must be a list of strings')
    res = _check_keys(doc.get('resources', {}), _RESOURCE_KEYS, 'resources')
    exclusive = res.get('exclusive', False)
    if not isinstance(exclusive, bool):
        raise SpecFormatError('resources.exclusive must be a boolean')
    resources = ResourceSpec(
        node_count=_int(res, 'node_count', 1),
        processes_per_node=_int(res, 'processes_per_node', 1),
        cpu_cores_per_process=_int(res, 'cpu_cores_per_process', 1),
        gpu_cores_per_process=_int(res, 'gpu_cores_per_process', 0),
        exclusive=exclusive,
    )
    att = _check_keys(doc.get('attributes', {}), _ATTRIBUTE_KEYS, 'attributes')
    wall = att.get('wall_time_s', JobAttributes.wall_time)
    if not isinstance(wall, (int, float)) or isinstance(wall, bool):
        raise SpecFormatError('attributes.wall_time_s must be a number')
    attributes = JobAttributes(
        wall_time=wall,
        queue_name=_opt_str(att, 'queue_name', 'attributes'),
        account=_opt_str(att, 'account', 'attributes'),
        custom=_str_map(att.get('custom', {}), 'attributes.custom'),
    )
    launcher = doc.get('launcher', Launcher.SINGLE.value)
    if not isinstance(launcher, str):
        raise SpecFormatError('spec.launcher must be a string')
    return JobSpec(
        executable=doc['executable'],
        arguments=tuple(args),
        environment=_str_map(doc.get('environment', {}), 'spec.environment'),
        directory=_opt_str(doc, 'directory', 'spec'),
        stdin_path=_opt_str(doc, 'stdin_path', 'spec'),
        stdout_path=_opt_str(doc, 'stdout_path', 'spec'),
        stderr_path=_opt_str(doc, 'stderr_path', 'spec'),
        resources=resources,
        attributes=attributes,
        launcher=launcher,
    )


def spec_to_dict(spec: JobSpec) -> Dict[str, Any]:
    r, a = spec.resources, spec.attributes
    return {
        'executable': spec.executable,
        'arguments': list(spec.arguments),
        'environment': dict(spec.environment),
        'directory': spec.directory,
        'stdin_path': spec.stdin_path,
        'stdout_path': spec.stdout_path,
        'stderr_path': spec.stderr_path,
        'resources': {
            'node_count': r.node_count,
            'processes_per_node': r.processes_per_node,
            'cpu_cores_per_process': r.cpu_cores_per_process,
            'gpu_cores_per_process': r.gpu_cores_per_process,
            'exclusive': r.exclusive,
        },
        'attributes': {
            'wall_time_s': a.wall_time,
            'queue_name': a.queue_name,
            'account': a.account,
            'custom': dict(a.custom),
        },
        'launcher': spec.launcher,
    }


def loads_spec(text: str) -> JobSpec:
    try:
        doc = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as e:
        raise SpecFormatError(f'not valid JSON: {e}') from None
    return spec_from_dict(doc)


def dumps_spec(spec: JobSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=2) + '\n'


def load_spec(path: Union[str, Path]) -> JobSpec:
    return loads_spec(Path(path).read_text())


def dump_spec(spec: JobSpec, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps_spec(spec))


def status_to_dict(status: JobStatus) -> Dict[str, Any]:
    return {'state': status.state.value, 'exit_code': status.exit_code,
            'message': status.message, 'timestamp': status.timestamp}


def status_from_dict(doc: Mapping[str, Any]) -> JobStatus:
    return JobStatus(JobState(doc['state']), timestamp=doc.get('timestamp', 0.0),
                     exit_code=doc.get('exit_code'), message=doc.get('message'))
