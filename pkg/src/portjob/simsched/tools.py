"""Command-line front ends: ``ssub``, ``sstat``, ``sscancel`` and ``ssim``."""
from __future__ import annotations

import argparse
import json
import sys
from typing import Callable, List, Optional

from portjob.simsched.store import DEFAULT_TIMESCALE, SimState, SimschedError


def _guard(prog: str, fn: Callable[[], int]) -> int:
    try:
        return fn()
    except SimschedError as e:
        print(f'{prog}: {e}', file=sys.stderr)
        return 1


def ssub_main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog='ssub', description='submit a job script')
    parser.add_argument('script')
    args = parser.parse_args(argv)

    def run() -> int:
        state = SimState.from_env()
        with state.locked():
            job_id = state.submit(args.script)
        print(job_id)
        return 0
    return _guard('ssub', run)


def sstat_main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog='sstat', description='print "id|STATE" per job')
    parser.add_argument('ids', nargs='*')
    args = parser.parse_args(argv)

    def run() -> int:
        state = SimState.from_env()
        with state.locked():
            rows = state.status(args.ids)
        sys.stdout.write(''.join(f'{i}|{token}\n' for i, token in rows))
        return 0
    return _guard('sstat', run)


def sscancel_main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog='sscancel', description='kill a pending or running job')
    parser.add_argument('id')
    args = parser.parse_args(argv)

    def run() -> int:
        state = SimState.from_env()
        with state.locked():
            state.cancel(args.id)
        return 0
    return _guard('sscancel', run)


def ssim_main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog='ssim', description='manage a simulated cluster')
    parser.add_argument('--dir', help='state directory (default: $SIMSCHED_DIR)')
    sub = parser.add_subparsers(dest='command', required=True)
    init = sub.add_parser('init', help='create or reset a cluster')
    init.add_argument('--nodes', type=int, required=True)
    init.add_argument('--cores', type=int, default=1, help='cores per node')
    init.add_argument('--backfill', action='store_true')
    clock = init.add_mutually_exclusive_group()
    clock.add_argument('--timescale', type=float, default=DEFAULT_TIMESCALE,
                       help='real seconds per virtual second')
    clock.add_argument('--stepped', action='store_true',
                       help='virtual clock moves only on "ssim stick"')
    stick = sub.add_parser('stick', help='advance a stepped clock')
    stick.add_argument('--by', type=float, default=1.0)
    sub.add_parser('show', help='print cluster configuration and clock')
    sub.add_parser('shutdown', help='kill all running and pending jobs')
    args = parser.parse_args(argv)

    def run() -> int:
        state = SimState(args.dir) if args.dir else SimState.from_env()
        if args.command == 'init':
            state.init(args.nodes, node_cores=args.cores, backfill=args.backfill,
                       timescale=args.timescale, stepped=args.stepped)
            return 0
        with state.locked():
            if args.command == 'stick':
                print(f'{state.stick(args.by):g}')
            elif args.command == 'show':
                state.catch_up()
                info = state.config
                info['now'] = state.now()
                print(json.dumps(info, sort_keys=True))
            else:
                print(state.shutdown())
        return 0
    return _guard('ssim', run)
