"""Bulk-vs-single insert benchmark driven through the proxy.

For each cell (entity, n, mode) the harness truncates the tables, starts a
proxy in the requested mode in front of the mock upstream, sends ``n``
POSTs sequentially, forces any remaining buffered uploads out, and sums the
timings of every INSERT the upstream issued during the cell.

Modes:

* coalesced: the entity path is an upload rule, so uploads are buffered and
  bulk-written.
* passthrough: no rule, every POST is forwarded as-is (what a conventional
  caching proxy does with uploads).
"""

from __future__ import annotations

import enum
import http.client
import json
import logging
import math
import random
import statistics
import string
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence
from urllib.parse import urlsplit

from ..config import CacheRule, Config, RuleKind
from ..server import ProxyServer
from .mock_upstream import MockUpstream
from .schema import FULL_LADDER, REFERENCE_ID, EntitySchema, entity

log = logging.getLogger(__name__)

PAYLOAD_CHARS = string.ascii_letters + string.digits
PAYLOAD_LENGTH = 32
ESTIMATORS = {"min": min, "median": statistics.median}


class Mode(enum.Enum):
    COALESCED = "coalesced"
    PASSTHROUGH = "passthrough"


class CellInvalid(RuntimeError):
    pass


@dataclass
class BenchSample:
    entity: str
    n_requests: int
    mode: Mode
    execution_ms: float
    planning_ms: float
    measured: str = "wall_clock"
    statements: int = 0
    rounds: int = 1

    def __post_init__(self):
        if self.execution_ms < 0 or self.planning_ms < 0:
            raise ValueError("timings must be non-negative")


def make_payloads(schema: EntitySchema, n: int, rng: random.Random) -> list[bytes]:
    """``n`` JSON rows whose text values are distinct 32-character strings."""
    seen = set()
    payloads = []
    for _ in range(n):
        row = {}
        for col in schema.columns:
            while True:
                value = "".join(rng.choices(PAYLOAD_CHARS, k=PAYLOAD_LENGTH))
                if value not in seen:
                    seen.add(value)
                    break
            row[col] = value
        for col in schema.fk_columns:
            row[col] = REFERENCE_ID
        payloads.append(json.dumps(row, separators=(",", ":")).encode())
    return payloads


def post(base_url: str, path: str, body: bytes, timeout: float = 30.0) -> int:
    parts = urlsplit(base_url)
    conn = http.client.HTTPConnection(parts.hostname, parts.port, timeout=timeout)
    try:
        conn.request("POST", path, body, {"Content-Type": "application/json"})
        resp = conn.getresponse()
        resp.read()
        return resp.status
    finally:
        conn.close()


class BenchHarness:
    """Runs cells against one mock upstream.

    ``threshold`` is the upload rule's flush threshold in coalesced mode.
    The rule TTL is long so that only the threshold and the final forced
    flush produce statements.
    """

    def __init__(self, upstream: MockUpstream, workdir=None, threshold: int = 10_000,
                 threads: int = 4, seed: int = 0):
        self.upstream = upstream
        self.threshold = threshold
        self.threads = threads
        self.rng = random.Random(seed)
        self._tmp = None
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="bench-")
            workdir = self._tmp.name
        self.workdir = Path(workdir)
        self._cell_no = 0

    def close(self) -> None:
        if self._tmp is not None:
            self._tmp.cleanup()

    def _proxy_config(self, schemas: Sequence[EntitySchema], mode: Mode) -> Config:
        self._cell_no += 1
        rules = ()
        if mode is Mode.COALESCED:
            rules = tuple(CacheRule(f"/{s.name}", RuleKind.UPLOAD, 3600.0, self.threshold)
                          for s in schemas)
        return Config(
            listen_address="127.0.0.1:0",
            upstream_base_url=self.upstream.url,
            thread_pool_size=self.threads,
            max_cache_bytes=1 << 30,
            cache_dir=str(self.workdir / f"cell-{self._cell_no}"),
            rules=rules,
        )

    def expected_statements(self, n: int, mode: Mode) -> int:
        return n if mode is Mode.PASSTHROUGH else math.ceil(n / self.threshold)

    def run_cell(self, name: str, n: int, mode: Mode) -> BenchSample:
        return self.run_cells([name], n, mode)[0]

    def run_cells(self, names: Sequence[str], n: int, mode: Mode) -> list[BenchSample]:
        """One cell per entity, measured side by side in a single proxy session.

        The client alternates between entities request by request, so every
        entity's statements run under the same host conditions; in coalesced
        mode the final bulk writes go out back to back.
        """
        schemas = [entity(name) for name in names]
        label = f"{'+'.join(names)} n={n} {mode.value}"
        self.upstream.reset()
        before = {name: self.upstream.db.count(name) for name in names}
        payloads = [make_payloads(schema, n, self.rng) for schema in schemas]
        proxy = ProxyServer(self._proxy_config(schemas, mode)).start()
        expected_status = 202 if mode is Mode.COALESCED else 201
        try:
            for bodies in zip(*payloads):
                for name, body in zip(names, bodies):
                    status = post(proxy.url, f"/{name}", body)
                    if status != expected_status:
                        raise CellInvalid(f"{label}: proxy answered {status} for {name}")
            if mode is Mode.COALESCED:
                proxy.flush_all()
        finally:
            failures = proxy.shutdown()
        if failures:
            raise CellInvalid(f"{label}: {failures} bulk writes failed")

        samples = []
        for name in names:
            inserted = self.upstream.db.count(name) - before[name]
            if inserted != n:
                raise CellInvalid(f"{label}: inserted {inserted} {name} rows, expected {n}")
            stmts = [s for s in self.upstream.statements if s.entity == name]
            samples.append(BenchSample(
                entity=name,
                n_requests=n,
                mode=mode,
                execution_ms=sum(s.timing.execution_ms for s in stmts),
                planning_ms=sum(s.timing.planning_ms for s in stmts),
                measured=stmts[0].timing.measured if stmts else self.upstream.db.measured,
                statements=len(stmts),
            ))
        return samples

    def _checked_cells(self, names: Sequence[str], n: int, mode: Mode) -> list[BenchSample]:
        try:
            samples = self.run_cells(names, n, mode)
        except CellInvalid as exc:
            log.warning("%s; rerunning cell once", exc)
            samples = self.run_cells(names, n, mode)
        for sample in samples:
            log.info("%-6s n=%-6d %-11s exec=%.3fms plan=%.3fms stmts=%d", sample.entity, n,
                     mode.value, sample.execution_ms, sample.planning_ms, sample.statements)
        return samples

    def run_ladder(self, name: str, modes: Iterable[Mode] = tuple(Mode),
                   ladder: Sequence[int] = FULL_LADDER) -> list[BenchSample]:
        return [s for n in ladder for mode in modes for s in self._checked_cells([name], n, mode)]

    def run_grid(self, entities: Sequence[str], ladder: Sequence[int],
                 modes: Sequence[Mode] = tuple(Mode), rounds: int = 1,
                 estimator: str = "min") -> list[BenchSample]:
        """Run every cell ``rounds`` times and combine each cell's timings.

        Within a round, all entities share each (n, mode) session (see
        :meth:`run_cells`), and a round visits the whole grid before the next
        starts, so a slow stretch on the host lands on every entity alike.
        Timing noise only ever adds time, so ``min`` is the default
        estimator; ``median`` is available too.
        """
        if rounds < 1:
            raise ValueError("rounds must be >= 1")
        combine = ESTIMATORS[estimator]
        runs: dict[tuple, list[BenchSample]] = {}
        for r in range(rounds):
            log.info("round %d/%d", r + 1, rounds)
            for n in ladder:
                for mode in modes:
                    for sample in self._checked_cells(entities, n, mode):
                        runs.setdefault((sample.entity, n, mode), []).append(sample)
        samples = []
        for (name, n, mode), cell in sorted(runs.items(), key=lambda kv: (
                list(entities).index(kv[0][0]), kv[0][1], list(modes).index(kv[0][2]))):
            if len({s.statements for s in cell}) != 1:
                raise CellInvalid(f"{name} n={n} {mode.value}: statement counts differ between "
                                  f"rounds: {[s.statements for s in cell]}")
            samples.append(BenchSample(
                entity=name,
                n_requests=n,
                mode=mode,
                execution_ms=combine([s.execution_ms for s in cell]),
                planning_ms=combine([s.planning_ms for s in cell]),
                measured=cell[0].measured,
                statements=cell[0].statements,
                rounds=rounds,
            ))
        return samples


def run_benchmark(db, entities: Sequence[str], ladder: Sequence[int],
                  modes: Sequence[Mode] = tuple(Mode), threshold: int = 10_000,
                  workdir: Optional[Path] = None, seed: int = 0, rounds: int = 1,
                  estimator: str = "min") -> list[BenchSample]:
    schemas = [entity(e) for e in entities]
    with MockUpstream(db, schemas) as upstream:
        harness = BenchHarness(upstream, workdir, threshold=threshold, seed=seed)
        try:
            return harness.run_grid(entities, ladder, modes, rounds, estimator)
        finally:
            harness.close()
