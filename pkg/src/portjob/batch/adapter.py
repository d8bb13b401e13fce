"""Declarative description of a command-line batch scheduler.

A :class:`QueueAdapterDescriptor` says which commands submit, query and
cancel jobs, how directives look in a submit script, how to find the job id
in the submit command's output and how native state tokens map onto
:class:`~portjob.model.JobState`. Dialects are loaded from JSON files shaped
like the descriptor itself.
"""
from __future__ import annotations

import json
import os
import re
import shlex
import shutil
import subprocess
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

from portjob.executor import SubmitFailed, render_launch
from portjob.model import JobSpec, JobState

EXIT_FILE = 'exit_file'
STATUS_OUTPUT = 'status_output'

DEFAULT_STATUS_PATTERN = r'^(?P<id>[^|\s]+)\|(?P<state>[^|\s]+)(?:\|(?P<exit>-?\d+))?$'


class AdapterError(Exception):
    pass


class DialectError(AdapterError, ValueError):
    pass


class UnsupportedAttribute(SubmitFailed):
    pass


class IdParseError(AdapterError):
    pass


class StatusCommandFailed(AdapterError):
    pass


@dataclass(frozen=True)
class QueueAdapterDescriptor:
    name: str
    submit_argv: Tuple[str, ...]
    status_argv: Tuple[str, ...]
    cancel_argv: Tuple[str, ...]
    directive_prefix: str
    id_pattern: str
    state_map: Mapping[str, JobState]
    poll_interval: float = 1.0
    exit_code_source: str = EXIT_FILE
    # rendering and parsing details beyond the core fields
    interpreter: str = '#!/bin/bash'
    directives: Mapping[str, str] = field(default_factory=dict)
    custom_directives: Mapping[str, str] = field(default_factory=dict)
    status_pattern: str = DEFAULT_STATUS_PATTERN
    absent_tokens: Tuple[str, ...] = ()
    id_separator: Optional[str] = None

    def __post_init__(self) -> None:
        for name in ('submit_argv', 'status_argv', 'cancel_argv', 'absent_tokens'):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.submit_argv or not self.status_argv or not self.cancel_argv:
            raise DialectError(f'{self.name}: submit/status/cancel commands must be non-empty')
        try:
            mapped = {k: JobState(v) for k, v in self.state_map.items()}
        except ValueError as e:
            raise DialectError(f'{self.name}: {e}') from None
        if JobState.NEW in mapped.values():
            raise DialectError(f'{self.name}: no native state may map to NEW')
        object.__setattr__(self, 'state_map', mapped)
        if self.exit_code_source not in (EXIT_FILE, STATUS_OUTPUT):
            raise DialectError(f'{self.name}: exit_code_source must be '
                               f'{EXIT_FILE!r} or {STATUS_OUTPUT!r}')
        if self.poll_interval <= 0:
            raise DialectError(f'{self.name}: poll_interval must be positive')
        for key in ('nodes', 'wall_time'):
            if key not in self.directives:
                raise DialectError(f'{self.name}: missing directive rule for {key!r}')
        for pattern in (self.id_pattern, self.status_pattern):
            try:
                re.compile(pattern)
            except re.error as e:
                raise DialectError(f'{self.name}: bad pattern {pattern!r}: {e}') from None
        if not self.interpreter.startswith('#!'):
            raise DialectError(f'{self.name}: interpreter line must start with "#!"')


_FIELDS = frozenset(QueueAdapterDescriptor.__dataclass_fields__)


def descriptor_from_dict(doc: Mapping[str, Any]) -> QueueAdapterDescriptor:
    unknown = sorted(set(doc) - _FIELDS)
    if unknown:
        raise DialectError(f'unknown dialect keys: {", ".join(unknown)}')
    try:
        return QueueAdapterDescriptor(**doc)
    except TypeError as e:
        raise DialectError(str(e)) from None


def load_dialect(source: Union[str, os.PathLike]) -> QueueAdapterDescriptor:
    """Load a dialect from a JSON file, or a bundled dialect by name (``simsched``)."""
    path = Path(source)
    if not path.exists() and re.fullmatch(r'[\w-]+', str(source)):
        text = resources.files('portjob.batch').joinpath(f'dialects/{source}.json').read_text()
    else:
        text = path.read_text()
    return descriptor_from_dict(json.loads(text))


# -- submit scripts ------------------------------------------------------------

@dataclass(frozen=True)
class SubmitScript:
    text: str
    path: Path

    def write(self) -> Path:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(self.text)
        self.path.chmod(0o755)
        return self.path


def _seconds(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def _template_values(spec: JobSpec) -> Dict[str, Any]:
    wall = spec.attributes.wall_time
    total = int(round(wall))
    r = spec.resources
    return {
        'nodes': r.node_count,
        'processes_per_node': r.processes_per_node,
        'total_processes': r.total_processes(),
        'cpu_cores_per_process': r.cpu_cores_per_process,
        'gpu_cores_per_process': r.gpu_cores_per_process,
        'wall_time_s': _seconds(wall),
        'wall_time_min': max(1, -(-total // 60)),
        'wall_time_hms': f'{total // 3600:02d}:{total // 60 % 60:02d}:{total % 60:02d}',
        'queue': spec.attributes.queue_name,
        'account': spec.attributes.account,
    }


def render_directives(spec: JobSpec, adapter: QueueAdapterDescriptor) -> List[str]:
    values = _template_values(spec)
    wanted = ['nodes', 'wall_time']
    if spec.attributes.queue_name is not None:
        wanted.append('queue')
    if spec.attributes.account is not None:
        wanted.append('account')
    for optional in ('processes_per_node', 'exclusive'):
        if optional in adapter.directives and (optional != 'exclusive' or spec.resources.exclusive):
            wanted.append(optional)
    lines = []
    for key in wanted:
        rule = adapter.directives.get(key)
        if rule is None:
            raise UnsupportedAttribute(f'{adapter.name} has no directive for {key}')
        lines.append(f'{adapter.directive_prefix} {rule.format(**values)}')
    for key, value in spec.attributes.custom.items():
        rule = adapter.custom_directives.get(key)
        if rule is None:
            raise UnsupportedAttribute(f'{adapter.name} has no directive for custom '
                                       f'attribute {key!r}')
        lines.append(f'{adapter.directive_prefix} {rule.format(key=key, value=value, **values)}')
    return lines


def exit_file_path(workdir: Union[str, Path], job_id: str) -> Path:
    return Path(workdir) / f'job-{job_id}.ec'


def script_path(workdir: Union[str, Path], job_id: str) -> Path:
    return Path(workdir) / f'job-{job_id}.sub'


def _redirects(spec: JobSpec) -> str:
    parts = []
    for op, path in (('<', spec.stdin_path), ('>', spec.stdout_path), ('2>', spec.stderr_path)):
        if path:
            parts.append(f'{op} {shlex.quote(os.path.abspath(path))}')
    if spec.stderr_path and spec.stderr_path == spec.stdout_path:
        parts[-1] = '2>&1'
    return ' '.join(parts)


def render_script(spec: JobSpec, adapter: QueueAdapterDescriptor, *, job_id: str,
                  workdir: Union[str, Path], mpi_shim: Optional[str] = None) -> SubmitScript:
    """Render the submit script for ``spec``. Equal inputs give byte-identical text."""
    if spec.attributes.wall_time <= 0:
        raise UnsupportedAttribute('batch jobs need a positive wall time')
    workdir = Path(workdir).resolve()
    lines = [adapter.interpreter]
    lines.extend(render_directives(spec, adapter))
    lines.append('')
    for key in sorted(spec.environment):
        lines.append(f'export {key}={shlex.quote(spec.environment[key])}')
    launch = render_launch(spec, mpi_shim=mpi_shim)
    for key in sorted(launch.environment):
        lines.append(f'export {key}={shlex.quote(launch.environment[key])}')
    rundir = Path(spec.directory).resolve() if spec.directory else workdir
    lines.append(f'cd {shlex.quote(str(rundir))}')
    command = shlex.join(launch.argv)
    redirects = _redirects(spec)
    if launch.replicas == 1:
        lines.append(f'{command} {redirects}'.rstrip())
        lines.append('ec=$?')
    else:
        lines.extend([
            'pids=""',
            f'for rank in $(seq 0 {launch.replicas - 1}); do',
            f'    PORTJOB_RANK=$rank {command} {redirects}'.rstrip() + ' &',
            '    pids="$pids $!"',
            'done',
            'ec=0',
            'for pid in $pids; do',
            '    wait "$pid"; rc=$?',
            '    if [ "$ec" -eq 0 ]; then ec=$rc; fi',
            'done',
        ])
    if adapter.exit_code_source == EXIT_FILE:
        ec_file = shlex.quote(str(exit_file_path(workdir, job_id)))
        lines.append(f'printf "%d\\n" "$ec" > {ec_file}.tmp && mv {ec_file}.tmp {ec_file}')
    lines.append('exit $ec')
    return SubmitScript('\n'.join(lines) + '\n', script_path(workdir, job_id))


# -- command output parsing ------------------------------------------------------

def parse_native_id(submit_output: str, adapter: QueueAdapterDescriptor) -> str:
    match = re.search(adapter.id_pattern, submit_output, re.MULTILINE)
    if match is None:
        raise IdParseError(f'no job id in submit output {submit_output.strip()!r}')
    if 'id' in match.groupdict():
        return match.group('id')
    return match.group(1) if match.re.groups else match.group(0)


class Polled(NamedTuple):
    state: JobState
    exit_code: Optional[int] = None
    message: Optional[str] = None
    vanished: bool = False


CommandRunner = Callable[[Sequence[str]], Tuple[int, str, str]]


def resolve_command(name: str, env: Optional[Mapping[str, str]] = None) -> str:
    """Find ``name`` on PATH, falling back to the directory of the running interpreter."""
    if os.sep in name:
        return name
    found = shutil.which(name, path=(env or os.environ).get('PATH'))
    if found:
        return found
    beside = os.path.join(os.path.dirname(sys.executable), name)
    return beside if os.path.exists(beside) else name


def run_command(argv: Sequence[str], *, env: Optional[Mapping[str, str]] = None,
                cwd: Optional[Union[str, Path]] = None, timeout: float = 60) -> Tuple[int, str, str]:
    argv = [resolve_command(argv[0], env), *argv[1:]]
    try:
        p = subprocess.run(argv, env=None if env is None else dict(env), cwd=cwd,
                           stdin=subprocess.DEVNULL, capture_output=True, text=True,
                           timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as e:
        return 127, '', str(e)
    return p.returncode, p.stdout, p.stderr


def _read_exit_file(path: Optional[Path]) -> Optional[int]:
    if path is None:
        return None
    try:
        return int(path.read_text().strip())
    except (OSError, ValueError):
        return None


def _finalize(state: JobState, code: Optional[int]) -> Polled:
    """Combine a mapped native state with whatever exit code is known."""
    if state is JobState.COMPLETED:
        if code is None or code == 0:
            return Polled(JobState.COMPLETED, 0)
        return Polled(JobState.FAILED, code, f'exit code {code}')
    if state is JobState.FAILED:
        if code == 0:
            return Polled(JobState.FAILED, None, 'scheduler reported failure')
        return Polled(JobState.FAILED, code, f'exit code {code}' if code is not None else None)
    return Polled(state)


def poll_once(native_ids: Sequence[str], adapter: QueueAdapterDescriptor, *,
              exit_files: Optional[Mapping[str, Path]] = None,
              runner: Optional[CommandRunner] = None) -> Dict[str, Polled]:
    """Query the scheduler once for all of ``native_ids``.

    Ids missing from the output (or reported with an ``absent_tokens`` token)
    are resolved through their exit file: present means COMPLETED/FAILED by
    code, absent means the job vanished and is reported FAILED.
    """
    exit_files = exit_files or {}
    runner = runner or run_command
    ids = list(native_ids)
    if adapter.id_separator is not None:
        argv = [*adapter.status_argv, adapter.id_separator.join(ids)]
    else:
        argv = [*adapter.status_argv, *ids]
    rc, out, err = runner(argv)
    if rc != 0:
        raise StatusCommandFailed(f'{shlex.join(argv)} exited {rc}: {err.strip() or out.strip()}')
    pattern = re.compile(adapter.status_pattern)
    seen: Dict[str, Tuple[str, Optional[int]]] = {}
    for line in out.splitlines():
        m = pattern.match(line.strip())
        if m is None:
            continue
        groups = m.groupdict()
        exit_text = groups.get('exit')
        seen[m.group('id')] = (m.group('state'), int(exit_text) if exit_text else None)
    results: Dict[str, Polled] = {}
    for native in ids:
        record = seen.get(native)
        if record is None or record[0] in adapter.absent_tokens:
            code = _read_exit_file(exit_files.get(native))
            if code is None:
                results[native] = Polled(JobState.FAILED, None, 'job vanished from the scheduler',
                                         vanished=True)
            else:
                results[native] = _finalize(JobState.COMPLETED, code)
            continue
        token, status_code = record
        state = adapter.state_map.get(token)
        if state is None:
            continue  # unmapped token: leave the job as it is
        if state.is_terminal and state is not JobState.CANCELED:
            if adapter.exit_code_source == EXIT_FILE:
                code = _read_exit_file(exit_files.get(native))
            else:
                code = status_code
            results[native] = _finalize(state, code)
        else:
            results[native] = Polled(state)
    return results
