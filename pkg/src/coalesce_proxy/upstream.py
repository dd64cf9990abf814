"""Everything that talks to the main server."""

from __future__ import annotations

import http.client
import json
import logging
import socket
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional
from urllib.parse import urlsplit

from .coalescer import FlushBatch, encode_records, path_digest

log = logging.getLogger(__name__)

COALESCE_HEADER = "X-Coalesce-Count"
BINARY_BULK_TYPE = "application/x-coalesced"

HOP_BY_HOP = frozenset({
    "connection", "keep-alive", "proxy-authenticate", "proxy-authorization",
    "te", "trailer", "trailers", "transfer-encoding", "upgrade", "proxy-connection",
})


class UpstreamError(Exception):
    pass


class UpstreamUnreachable(UpstreamError):
    pass


class Non2xx(UpstreamError):
    def __init__(self, status: int, body: bytes = b""):
        super().__init__(f"upstream answered {status}")
        self.status = status
        self.body = body


class BulkWriteFailed(UpstreamError):
    def __init__(self, batch: FlushBatch, deadletter: Optional[Path], cause: Exception):
        super().__init__(f"bulk write of {len(batch)} payloads to {batch.rule_path} failed: {cause}")
        self.batch = batch
        self.deadletter = deadletter


@dataclass
class UpstreamResponse:
    status: int
    reason: str
    headers: list[tuple[str, str]]
    body: bytes


@dataclass
class BulkResult:
    accepted: int


def strip_hop_by_hop(headers: list[tuple[str, str]]) -> list[tuple[str, str]]:
    named = set()
    for name, value in headers:
        if name.lower() == "connection":
            named.update(tok.strip().lower() for tok in value.split(","))
    drop = HOP_BY_HOP | named
    return [(n, v) for n, v in headers if n.lower() not in drop]


def encode_bulk(payloads: list[bytes]) -> tuple[bytes, str]:
    """Body and content type for a bulk envelope.

    A JSON array of the payloads verbatim when every payload parses as JSON,
    otherwise the log-record framing.
    """
    try:
        for p in payloads:
            json.loads(p)
    except (ValueError, UnicodeDecodeError):
        return encode_records(payloads), BINARY_BULK_TYPE
    return b"[" + b",".join(payloads) + b"]", "application/json"


class UpstreamClient:
    def __init__(self, base_url: str, timeout: float = 30.0, deadletter_dir=None,
                 retry_delay: float = 1.0):
        parts = urlsplit(base_url)
        self.host = parts.hostname
        self.port = parts.port or 80
        self.prefix = parts.path.rstrip("/")
        self.timeout = timeout
        self.retry_delay = retry_delay
        self.deadletter_dir = Path(deadletter_dir) if deadletter_dir is not None else None
        self.bulk_failures = 0
        self._dl_lock = threading.Lock()

    def _request(self, method, path, body=None, headers=()) -> UpstreamResponse:
        conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
        try:
            conn.putrequest(method, self.prefix + path, skip_accept_encoding=True)
            for name, value in headers:
                conn.putheader(name, value)
            if body is not None or method in ("POST", "PUT", "PATCH"):
                conn.putheader("Content-Length", str(len(body or b"")))
            conn.endheaders(body or None)
            resp = conn.getresponse()
            data = resp.read()
            return UpstreamResponse(resp.status, resp.reason, resp.getheaders(), data)
        except (OSError, http.client.HTTPException) as exc:
            raise UpstreamUnreachable(f"{method} {path} to {self.host}:{self.port}: {exc}") from exc
        finally:
            conn.close()

    def forward(self, method: str, path: str, headers: list[tuple[str, str]],
                body: Optional[bytes]) -> UpstreamResponse:
        out = [(n, v) for n, v in strip_hop_by_hop(headers)
               if n.lower() not in ("host", "content-length")]
        resp = self._request(method, path, body, out)
        resp.headers = strip_hop_by_hop(resp.headers)
        return resp

    def fetch(self, path: str) -> bytes:
        resp = self._request("GET", path)
        if not 200 <= resp.status < 300:
            raise Non2xx(resp.status, resp.body)
        return resp.body

    def post_bulk(self, batch: FlushBatch) -> BulkResult:
        body, ctype = encode_bulk(batch.payloads)
        resp = self._request("POST", batch.rule_path, body, [
            ("Content-Type", ctype),
            (COALESCE_HEADER, str(len(batch))),
        ])
        if not 200 <= resp.status < 300:
            raise Non2xx(resp.status, resp.body)
        try:
            accepted = int(json.loads(resp.body)["accepted"])
        except (ValueError, KeyError, TypeError):
            accepted = len(batch)
        return BulkResult(accepted)

    def bulk_write(self, batch: FlushBatch) -> BulkResult:
        """Deliver a batch as one POST; retry once, then dead-letter it."""
        try:
            return self.post_bulk(batch)
        except UpstreamError as exc:
            log.warning("bulk write to %s failed (%s); retrying in %.1fs",
                        batch.rule_path, exc, self.retry_delay)
        time.sleep(self.retry_delay)
        try:
            return self.post_bulk(batch)
        except UpstreamError as exc:
            self.bulk_failures += 1
            path = self.write_deadletter(batch)
            log.error("bulk write to %s failed twice; %d payloads dead-lettered to %s",
                      batch.rule_path, len(batch), path)
            raise BulkWriteFailed(batch, path, exc) from exc

    def write_deadletter(self, batch: FlushBatch) -> Optional[Path]:
        if self.deadletter_dir is None:
            return None
        self.deadletter_dir.mkdir(parents=True, exist_ok=True)
        with self._dl_lock:
            stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
            digest = path_digest(batch.rule_path)
            n = 0
            path = self.deadletter_dir / f"{stamp}-{digest}.log"
            while path.exists():
                n += 1
                path = self.deadletter_dir / f"{stamp}.{n}-{digest}.log"
            path.write_bytes(encode_records(batch.payloads))
        return path


def wait_for_port(host: str, port: int, timeout: float = 5.0) -> None:
    deadline = time.monotonic() + timeout
    while True:
        try:
            with socket.create_connection((host, port), timeout=0.5):
                return
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.02)
