"""Minimal web server standing in for the proxied application.

Routes:

``POST /<entity>``
    One JSON row, inserted with a single-row INSERT. With an
    ``X-Coalesce-Count`` header the body is a bulk envelope (JSON array, or
    length-prefixed records of JSON rows) inserted with one multi-row INSERT.
``GET /<entity>/latest``
    Most recently inserted row as JSON.
``GET /__count/<entity>``
    ``{"count": n}``.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import Counter
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Sequence

from ..coalescer import decode_records
from ..upstream import BINARY_BULK_TYPE, COALESCE_HEADER
from .database import ForeignKeyViolation, Timing
from .schema import ENTITIES, EntitySchema, validate_row

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StatementRecord:
    entity: str
    rows: int
    timing: Timing


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "_Server"

    def log_message(self, format, *args):
        log.debug(format, *args)

    def _reply(self, status: int, payload) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        mock = self.server.mock
        mock.count_request("GET", self.path)
        parts = [p for p in self.path.split("?", 1)[0].split("/") if p]
        if len(parts) == 2 and parts[0] == "__count" and parts[1] in mock.schemas:
            self._reply(200, {"count": mock.db.count(parts[1])})
        elif len(parts) == 2 and parts[1] == "latest" and parts[0] in mock.schemas:
            row = mock.db.latest(mock.schemas[parts[0]])
            self._reply(200 if row is not None else 404, row or {"error": "empty"})
        else:
            self._reply(404, {"error": "not found"})

    def do_POST(self):
        mock = self.server.mock
        mock.count_request("POST", self.path)
        name = self.path.split("?", 1)[0].strip("/")
        body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
        schema = mock.schemas.get(name)
        if schema is None:
            self._reply(404, {"error": f"unknown entity {name!r}"})
            return
        bulk = self.headers.get(COALESCE_HEADER)
        try:
            if bulk is None:
                rows = [json.loads(body)]
            elif self.headers.get("Content-Type", "").startswith(BINARY_BULK_TYPE):
                payloads, torn = decode_records(body)
                if torn:
                    raise ValueError("truncated bulk body")
                rows = [json.loads(p) for p in payloads]
            else:
                rows = json.loads(body)
                if not isinstance(rows, list):
                    raise ValueError("bulk body must be a JSON array")
            if bulk is not None and int(bulk) != len(rows):
                raise ValueError(f"{COALESCE_HEADER} says {bulk}, body holds {len(rows)}")
            rows = [validate_row(schema, r) for r in rows]
            if not rows:
                raise ValueError("empty bulk body")
        except ValueError as exc:
            self._reply(400, {"error": str(exc)})
            return
        try:
            mock.insert(schema, rows)
        except ForeignKeyViolation as exc:
            self._reply(422, {"error": str(exc), "rejected": len(rows)})
            return
        self._reply(201 if bulk is None else 200, {"accepted": len(rows)})


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 1024


class MockUpstream:
    def __init__(self, db, schemas: Sequence[EntitySchema] = tuple(ENTITIES.values()),
                 host: str = "127.0.0.1", port: int = 0):
        self.db = db
        self.schemas = {s.name: s for s in schemas}
        self.statements: list[StatementRecord] = []
        self.requests: Counter = Counter()
        self._lock = threading.Lock()
        self._httpd = _Server((host, port), _Handler)
        self._httpd.mock = self
        self._thread = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def count_request(self, method: str, path: str) -> None:
        with self._lock:
            self.requests[(method, path.split("?", 1)[0])] += 1

    def insert(self, schema: EntitySchema, rows) -> Timing:
        timing = self.db.insert(schema, rows)
        with self._lock:
            self.statements.append(StatementRecord(schema.name, len(rows), timing))
        return timing

    def reset(self) -> None:
        """Truncate tables, reseed references, clear logs and counters."""
        self.db.reset()
        with self._lock:
            self.statements.clear()
            self.requests.clear()

    def start(self) -> "MockUpstream":
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        kwargs={"poll_interval": 0.05},
                                        name="mock-upstream", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve_mock_upstream(db, schemas: Sequence[EntitySchema] = tuple(ENTITIES.values()),
                        host: str = "127.0.0.1", port: int = 0) -> MockUpstream:
    return MockUpstream(db, schemas, host, port).start()
