"""Run the reduced ladder for all four entities and write the CSV tables.

    python scripts/run_desk_benchmark.py --out results/desk

Pass --full for the complete 1..100000 ladder (slow: tens of minutes).
"""

import argparse
import sys

from coalesce_proxy.bench.schema import DESK_LADDER, ENTITIES, FULL_LADDER
from coalesce_proxy.cli import bench_main


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="results/desk")
    parser.add_argument("--full", action="store_true")
    parser.add_argument("--clock", choices=("thread", "wall"), default="thread")
    parser.add_argument("--postgres-dsn")
    args = parser.parse_args()

    ladder = FULL_LADDER if args.full else DESK_LADDER
    argv = ["--log-level", "info", "run", "--out", args.out, "--clock", args.clock,
            "--entities", ",".join(ENTITIES), "--ladder", ",".join(map(str, ladder))]
    if args.postgres_dsn:
        argv += ["--postgres-dsn", args.postgres_dsn]
    return bench_main(argv)


if __name__ == "__main__":
    sys.exit(main())
