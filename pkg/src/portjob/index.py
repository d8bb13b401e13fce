"""Persisted job index: client id to backend, native id and last known statuses."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional

from portjob.model import JobState, JobStatus, status_from_dict, status_to_dict


def default_state_dir() -> Path:
    env = os.environ.get('PORTJOB_DIR')
    return Path(env) if env else Path.home() / '.portjob'


def write_json(path: Path, doc: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.')
    with os.fdopen(fd, 'w') as f:
        json.dump(doc, f, indent=1, sort_keys=True)
    os.replace(tmp, path)


class JobIndex:
    """One JSON record per job under ``<state dir>/jobs``.

    Records are written atomically, so concurrent readers see either the old
    or the new version.
    """

    def __init__(self, state_dir: Optional[os.PathLike] = None) -> None:
        self.root = Path(state_dir) if state_dir else default_state_dir()
        self.jobs = self.root / 'jobs'
        self.cancels = self.root / 'cancel'

    def path(self, job_id: str) -> Path:
        if not job_id or '/' in job_id or job_id.startswith('.'):
            raise KeyError(job_id)
        return self.jobs / f'{job_id}.json'

    def load(self, job_id: str) -> Dict[str, Any]:
        try:
            with open(self.path(job_id)) as f:
                return json.load(f)
        except (FileNotFoundError, json.JSONDecodeError):
            raise KeyError(job_id) from None

    def save(self, record: Dict[str, Any]) -> None:
        write_json(self.path(record['id']), record)

    def exists(self, job_id: str) -> bool:
        try:
            return self.path(job_id).exists()
        except KeyError:
            return False

    def request_cancel(self, job_id: str) -> None:
        self.cancels.mkdir(parents=True, exist_ok=True)
        (self.cancels / job_id).touch()

    def cancel_requested(self, job_id: str) -> bool:
        return (self.cancels / job_id).exists()


def history(record: Dict[str, Any]) -> List[JobStatus]:
    return [status_from_dict(d) for d in record.get('history', [])]


def set_history(record: Dict[str, Any], statuses: List[JobStatus]) -> None:
    record['history'] = [status_to_dict(s) for s in statuses]


def last_state(record: Dict[str, Any]) -> JobState:
    h = record.get('history') or []
    return JobState(h[-1]['state']) if h else JobState.NEW
