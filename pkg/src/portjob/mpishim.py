"""``portjob-mpirun -n N exe [args...]``: a stand-in for an MPI launcher.

Starts ``N`` copies of ``exe`` with ``PORTJOB_RANK``/``PORTJOB_NPROCS`` set,
forwards SIGTERM/SIGINT to them and exits with the first nonzero exit code
(or 0).
"""
from __future__ import annotations

import argparse
import os
import signal
import subprocess
import sys
from typing import List, Optional


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog='portjob-mpirun')
    parser.add_argument('-n', type=int, required=True, dest='nprocs')
    parser.add_argument('command', nargs=argparse.REMAINDER)
    args = parser.parse_args(argv)
    if args.nprocs < 1 or not args.command:
        parser.error('need -n >= 1 and a command')

    procs: List[subprocess.Popen] = []

    def forward(signum: int, frame: object) -> None:
        for p in procs:
            if p.poll() is None:
                p.send_signal(signum)

    signal.signal(signal.SIGTERM, forward)
    signal.signal(signal.SIGINT, forward)
    for rank in range(args.nprocs):
        env = dict(os.environ, PORTJOB_RANK=str(rank), PORTJOB_NPROCS=str(args.nprocs))
        try:
            procs.append(subprocess.Popen(args.command, env=env))
        except OSError as e:
            print(f'portjob-mpirun: cannot start {args.command[0]}: {e}', file=sys.stderr)
            forward(signal.SIGTERM, None)
            for p in procs:
                p.wait()
            return 127
    result = 0
    for p in procs:
        rc = p.wait()
        code = rc if rc >= 0 else 128 - rc
        if code and not result:
            result = code
    return result


if __name__ == '__main__':
    sys.exit(main())
