"""Command line entry points: ``proxy`` and ``bench``."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import tempfile
import threading
from pathlib import Path

from .config import ConfigError, load_config
from .cost_model import DomainError, InsertCostParams, bulk_mode_cost, predicted_speedup, single_mode_cost
from .server import ProxyServer, replay_deadletter


def _setup_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper()),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def proxy_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="proxy", description=__doc__)
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--replay-deadletter", action="store_true",
                        help="re-send dead-lettered bulk batches and exit")
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    try:
        config = load_config(args.config)
    except (OSError, ConfigError) as exc:
        print(f"proxy: {exc}", file=sys.stderr)
        return 2

    if args.replay_deadletter:
        replayed, failed = replay_deadletter(config)
        print(f"replayed {replayed} batches, {failed} failed")
        return 1 if failed else 0

    server = ProxyServer(config).start()
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    print(f"listening on {server.url}", flush=True)
    stop.wait()
    failures = server.shutdown()
    if failures:
        logging.getLogger("proxy").error("%d buffered batches could not be flushed", failures)
        return 1
    return 0


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _cmd_run(args) -> int:
    from .bench import (Mode, PostgresDatabase, SqliteDatabase, build_report, run_benchmark,
                        write_report, write_samples)
    from .bench.schema import entity

    entities = _csv_list(args.entities)
    schemas = [entity(e) for e in entities]
    ladder = [int(n) for n in _csv_list(args.ladder)]
    modes = [Mode(m) for m in _csv_list(args.modes)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.postgres_dsn:
        db = PostgresDatabase(args.postgres_dsn, schemas)
    else:
        db = SqliteDatabase(str(args.db or out / "bench.sqlite3"), schemas, clock=args.clock)
    with tempfile.TemporaryDirectory(prefix="bench-cells-") as workdir:
        samples = run_benchmark(db, entities, ladder, modes, threshold=args.threshold,
                                workdir=Path(workdir), seed=args.seed, rounds=args.rounds,
                                estimator=args.estimator)
    db.close()
    write_samples(samples, out / "samples.csv")
    if set(modes) == set(Mode):
        report = build_report(samples)
        write_report(report, out)
        _print_speedups(report)
    return 0


def _print_speedups(report) -> None:
    print(f"{'entity':<8} {'exec speedup':>12} {'plan speedup':>12}")
    for e in report.entities:
        print(f"{e:<8} {report.execution_speedup[e]:>12.2f} {report.planning_speedup[e]:>12.2f}")


def _cmd_report(args) -> int:
    from .bench import ReportError, build_report, read_samples, write_report

    directory = Path(args.dir)
    try:
        report = build_report(read_samples(directory / "samples.csv"))
    except (OSError, ReportError) as exc:
        print(f"bench report: {exc}", file=sys.stderr)
        return 1
    for path in write_report(report, directory):
        print(path)
    _print_speedups(report)
    return 0


def _cmd_predict(args) -> int:
    try:
        p = InsertCostParams(row_size=args.row_size, index_count=args.indexes)
        n = args.rows
        line = (f"single={single_mode_cost(p, n):g} bulk={bulk_mode_cost(p, n):g} "
                f"speedup={predicted_speedup(p, n):.4f} bound={p.speedup_bound:.4f}")
    except DomainError as exc:
        print(f"bench predict: {exc}", file=sys.stderr)
        return 2
    print(line)
    return 0


def bench_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bench", description="bulk vs single insert benchmark")
    parser.add_argument("--log-level", default="warning")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the request ladder through the proxy")
    run.add_argument("--entities", default="4c0fk,4c2fk,10c0fk,10c2fk")
    run.add_argument("--ladder", default="1,100,1000,5000,10000,25000,50000,100000")
    run.add_argument("--modes", default="coalesced,passthrough")
    run.add_argument("--out", required=True)
    run.add_argument("--threshold", type=int, default=10_000)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--rounds", type=int, default=3,
                     help="passes over the whole grid; cells are combined with --estimator")
    run.add_argument("--estimator", choices=("min", "median"), default="min")
    run.add_argument("--db", help="SQLite file (default: <out>/bench.sqlite3)")
    run.add_argument("--clock", choices=("thread", "wall"), default="thread",
                     help="statement clock for the embedded database")
    run.add_argument("--postgres-dsn", help="use PostgreSQL with EXPLAIN ANALYZE timing")
    run.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", help="rebuild CSV tables from <dir>/samples.csv")
    rep.add_argument("dir")
    rep.set_defaults(func=_cmd_report)

    pred = sub.add_parser("predict", help="cost-model speedup for a batch size")
    pred.add_argument("--rows", type=int, required=True)
    pred.add_argument("--row-size", type=float, default=1.0)
    pred.add_argument("--indexes", type=int, default=0)
    pred.set_defaults(func=_cmd_predict)

    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(bench_main())
