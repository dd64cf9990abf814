"""Database backends for the mock upstream, with per-statement timing.

PostgreSQL runs each INSERT under ``EXPLAIN ANALYZE`` and reports the
server's own planning and execution times. The embedded SQLite backend has
no such facility, so it times the statement from the calling thread and
reports planning time as zero. By default it uses the database thread's
CPU clock, which leaves out time spent descheduled while other threads
(proxy workers, the load generator) ran; ``clock="wall"`` uses
``perf_counter`` instead.
"""

from __future__ import annotations

import re
import sqlite3
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .schema import (FK_TARGETS, REFERENCE_ID, EntitySchema, create_table_sql, creation_order,
                     entity, insert_sql, quote_ident, reference_row)

MEASURED_EXPLAIN = "explain"
MEASURED_WALL = "wall_clock"
MEASURED_THREAD_CPU = "thread_cpu"

_EXEC_RE = re.compile(r"^\s*Execution\s+time:\s*([0-9.]+)\s*ms", re.IGNORECASE | re.MULTILINE)
_PLAN_RE = re.compile(r"^\s*Planning\s+time:\s*([0-9.]+)\s*ms", re.IGNORECASE | re.MULTILINE)


class MeasurementError(RuntimeError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class ForeignKeyViolation(Exception):
    pass


@dataclass(frozen=True)
class Timing:
    execution_ms: float
    planning_ms: float
    measured: str


def parse_explain(text: str) -> tuple[float, float]:
    """(execution_ms, planning_ms) from EXPLAIN ANALYZE text output.

    Trigger time (FK checks) is already contained in the execution time.
    """
    exec_m = _EXEC_RE.search(text)
    plan_m = _PLAN_RE.search(text)
    if exec_m is None or plan_m is None:
        raise MeasurementError("EXPLAIN output lacks Execution/Planning time", text)
    return float(exec_m.group(1)), float(plan_m.group(1))


class SqliteDatabase:
    """Embedded database owned by one dedicated thread.

    Every call runs on that thread, so statement timings always come from the
    same warmed-up thread and allocator arena rather than from whichever
    short-lived request thread happened to receive the upload.
    """

    def __init__(self, path: str, schemas: Sequence[EntitySchema], clock: str = "thread"):
        if clock not in ("thread", "wall"):
            raise ValueError("clock must be 'thread' or 'wall'")
        self._timer = time.thread_time if clock == "thread" else time.perf_counter
        self.measured = MEASURED_THREAD_CPU if clock == "thread" else MEASURED_WALL
        self.schemas = creation_order(schemas)
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="sqlite")
        self.conn = self._run(lambda: sqlite3.connect(path, isolation_level=None))
        self._run(self._setup)
        self.reset()

    def _run(self, fn):
        return self._executor.submit(fn).result()

    def _setup(self) -> None:
        self.conn.execute("PRAGMA foreign_keys = ON")
        self.conn.execute("PRAGMA journal_mode = MEMORY")
        self.conn.execute("PRAGMA synchronous = OFF")
        for schema in self.schemas:
            self.conn.execute(create_table_sql(schema))

    def reset(self) -> None:
        """Empty every table and reseed the FK reference rows."""
        self._run(self._reset)

    def _reset(self) -> None:
        for schema in reversed(self.schemas):
            self.conn.execute(f"DELETE FROM {schema.table}")
        for name in FK_TARGETS:
            ref = entity(name)
            row = dict(reference_row(ref), id=REFERENCE_ID)
            cols = ["id"] + ref.columns
            self.conn.execute(
                f"INSERT OR IGNORE INTO {ref.table} ({', '.join(cols)}) "
                f"VALUES ({', '.join('?' for _ in cols)})",
                [row[c] for c in cols],
            )

    def timed_execute(self, sql: str) -> Timing:
        return self._run(lambda: self._timed(sql))

    def _timed(self, sql: str) -> Timing:
        start = self._timer()
        try:
            self.conn.execute(sql)
        except sqlite3.IntegrityError as exc:
            if "FOREIGN KEY" in str(exc).upper():
                raise ForeignKeyViolation(str(exc)) from exc
            raise
        elapsed = self._timer() - start
        return Timing(elapsed * 1000.0, 0.0, self.measured)

    def insert(self, schema: EntitySchema, rows) -> Timing:
        return self.timed_execute(insert_sql(schema, rows))

    def count(self, name: str) -> int:
        return self._run(lambda: self.conn.execute(
            f"SELECT COUNT(*) FROM {quote_ident(name)}").fetchone()[0])

    def latest(self, schema: EntitySchema):
        row = self._run(lambda: self.conn.execute(
            f"SELECT {', '.join(schema.all_columns)} FROM {schema.table} "
            "ORDER BY id DESC LIMIT 1").fetchone())
        return None if row is None else dict(zip(schema.all_columns, row))

    def close(self) -> None:
        self._run(self.conn.close)
        self._executor.shutdown()


class PostgresDatabase:
    """Server-grade backend measured with EXPLAIN ANALYZE (needs ``psycopg``)."""

    measured = MEASURED_EXPLAIN

    def __init__(self, dsn: str, schemas: Sequence[EntitySchema]):
        import psycopg

        self._fk_error = psycopg.errors.ForeignKeyViolation
        self.schemas = creation_order(schemas)
        self.lock = threading.Lock()
        self.conn = psycopg.connect(dsn, autocommit=True)
        with self.lock:
            for schema in self.schemas:
                self.conn.execute(create_table_sql(schema, serial="BIGSERIAL PRIMARY KEY"))
        self.reset()

    def reset(self) -> None:
        with self.lock:
            self.conn.execute(
                "TRUNCATE " + ", ".join(s.table for s in self.schemas) + " RESTART IDENTITY CASCADE")
            for name in FK_TARGETS:
                ref = entity(name)
                cols = ["id"] + ref.columns
                row = dict(reference_row(ref), id=REFERENCE_ID)
                self.conn.execute(
                    f"INSERT INTO {ref.table} ({', '.join(cols)}) VALUES "
                    f"({', '.join('%s' for _ in cols)}) ON CONFLICT DO NOTHING",
                    [row[c] for c in cols],
                )
                self.conn.execute(
                    f"SELECT setval(pg_get_serial_sequence('{ref.table}', 'id'), "
                    f"GREATEST((SELECT MAX(id) FROM {ref.table}), 1))")

    def timed_execute(self, sql: str) -> Timing:
        with self.lock:
            try:
                rows = self.conn.execute("EXPLAIN (ANALYZE, FORMAT TEXT) " + sql).fetchall()
            except self._fk_error as exc:
                raise ForeignKeyViolation(str(exc)) from exc
        execution_ms, planning_ms = parse_explain("\n".join(r[0] for r in rows))
        return Timing(execution_ms, planning_ms, MEASURED_EXPLAIN)

    def insert(self, schema: EntitySchema, rows) -> Timing:
        return self.timed_execute(insert_sql(schema, rows))

    def count(self, name: str) -> int:
        with self.lock:
            return self.conn.execute(f"SELECT COUNT(*) FROM {quote_ident(name)}").fetchone()[0]

    def latest(self, schema: EntitySchema):
        with self.lock:
            row = self.conn.execute(
                f"SELECT {', '.join(schema.all_columns)} FROM {schema.table} "
                f"ORDER BY id DESC LIMIT 1").fetchone()
        return None if row is None else dict(zip(schema.all_columns, row))

    def close(self) -> None:
        self.conn.close()


def capture_timing(db, statement: str) -> Timing:
    if not statement.lstrip().upper().startswith("INSERT"):
        raise ValueError("capture_timing only measures INSERT statements")
    return db.timed_execute(statement)
