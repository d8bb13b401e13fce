"""A small simulated batch scheduler used to exercise the batch backend."""
from portjob.simsched.engine import (DONE, FAIL, KILL, PEND, RUN, UNKNOWN, Reservation,
                                     SimCluster, SimEvent, SimJob, StartDecision, TraceJob,
                                     advance, apply_starts, cancel, format_events,
                                     head_reservation, run_until_idle, schedule_step,
                                     simulate, submit)

__all__ = [
    'DONE', 'FAIL', 'KILL', 'PEND', 'RUN', 'UNKNOWN', 'Reservation', 'SimCluster', 'SimEvent',
    'SimJob', 'StartDecision', 'TraceJob', 'advance', 'apply_starts', 'cancel',
    'format_events', 'head_reservation', 'run_until_idle', 'schedule_step', 'simulate',
    'submit',
]
