"""The caching proxy: acceptor, worker pool, request flow, flusher."""

from __future__ import annotations

import logging
import queue
import socket
import threading
from http.server import BaseHTTPRequestHandler
from pathlib import Path
from typing import Optional
from urllib.parse import urlsplit

from .cache_store import CacheStore, DiskWriteFailed, Status
from .coalescer import BufferWriteError, FlushBatch, Trigger, WriteCoalescer, decode_records, path_digest
from .config import Config, RuleKind, match_rule, split_host_port
from .pool import Task, WorkerPool
from .upstream import (BulkWriteFailed, Non2xx, UpstreamClient, UpstreamError,
                       UpstreamUnreachable)

log = logging.getLogger(__name__)

METRICS_PATH = "/__rcsys/metrics"
_NO_BODY_STATUSES = {204, 304}
_STOP = object()


class ProxyRequestHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # no HTTP/0.9: error replies always carry a status line
    default_request_version = "HTTP/1.1"
    timeout = 30

    server: "ProxyServer"

    def log_message(self, format, *args):
        log.debug("%s - %s", self.address_string(), format % args)

    def do_GET(self):
        self._dispatch()

    do_POST = do_PUT = do_PATCH = do_DELETE = do_HEAD = do_OPTIONS = do_GET

    def _read_body(self) -> Optional[bytes]:
        if "chunked" in self.headers.get("Transfer-Encoding", "").lower():
            chunks = []
            while True:
                size_line = self.rfile.readline(65537)
                size = int(size_line.split(b";", 1)[0].strip(), 16)
                if size == 0:
                    # trailers
                    while self.rfile.readline(65537) not in (b"\r\n", b"\n", b""):
                        pass
                    return b"".join(chunks)
                chunks.append(self.rfile.read(size))
                self.rfile.readline(3)
        length = self.headers.get("Content-Length")
        if length is None:
            return None
        n = int(length)
        if n < 0:
            raise ValueError("negative Content-Length")
        return self.rfile.read(n)

    def _send(self, status: int, body: bytes = b"", headers=(), reason: Optional[str] = None,
              content_length: bool = True):
        self.send_response_only(status, reason)
        for name, value in headers:
            self.send_header(name, value)
        if content_length and status not in _NO_BODY_STATUSES and not 100 <= status < 200:
            self.send_header("Content-Length", str(len(body)))
        self.send_header("Connection", "close")
        self.end_headers()
        if body and self.command != "HEAD":
            self.wfile.write(body)
        self.close_connection = True

    def _dispatch(self):
        proxy = self.server
        proxy.store.enforce_capacity(proxy.config.max_cache_bytes)

        target = self.path
        if target.startswith(("http://", "https://")):
            parts = urlsplit(target)
            target = (parts.path or "/") + (f"?{parts.query}" if parts.query else "")

        try:
            body = self._read_body()
        except ValueError:
            self.send_error(400, "Bad request body")
            return

        if self.command == "GET" and target.split("?", 1)[0] == METRICS_PATH:
            self._send(200, proxy.metrics_text().encode(), [("Content-Type", "text/plain")])
            return

        rule = match_rule(proxy.config, self.command, target)
        if rule is None:
            self._forward(target, body)
        elif rule.kind is RuleKind.UPLOAD:
            self._buffer(rule, target, body or b"")
        else:
            self._download(rule, target)

    def _forward(self, target: str, body: Optional[bytes]):
        proxy = self.server
        try:
            resp = proxy.upstream.forward(self.command, target, list(self.headers.items()), body)
        except UpstreamUnreachable as exc:
            log.warning("forward failed: %s", exc)
            self._send(502, b"upstream unreachable\n")
            return
        if self.command == "HEAD":
            self._send(resp.status, b"", resp.headers, resp.reason, content_length=False)
            return
        headers = [(n, v) for n, v in resp.headers if n.lower() != "content-length"]
        self._send(resp.status, resp.body, headers, resp.reason)

    def _buffer(self, rule, target, body: bytes):
        proxy = self.server
        try:
            batch = proxy.coalescer.buffer_upload(rule, body)
        except BufferWriteError as exc:
            log.error("%s; forwarding upload directly", exc)
            self._forward(target, body)
            return
        proxy.count("buffered_uploads")
        if batch is not None:
            proxy.schedule_flush(batch)
        self._send(202, b"")

    def _download(self, rule, key: str):
        proxy = self.server
        store = proxy.store
        result = store.lookup(key)
        if result.status is Status.HIT:
            self._send(200, result.body)
            return
        with store.refresh_guard(key):
            body = store.peek_fresh(key)
            if body is None:
                try:
                    body = proxy.upstream.fetch(key)
                except UpstreamError as exc:
                    stale = store.peek_stale(key) if result.status is Status.EXPIRED else None
                    if stale is not None:
                        log.warning("refresh of %s failed (%s); serving stale copy", key, exc)
                        store.note_served(len(stale))
                        self._send(200, stale)
                    elif isinstance(exc, Non2xx):
                        self._send(exc.status, exc.body)
                    else:
                        self._send(502, b"upstream unreachable\n")
                    return
                try:
                    store.put(key, body, rule.ttl_seconds)
                except DiskWriteFailed as exc:
                    log.error("%s", exc)
        store.note_served(len(body))
        self._send(200, body)


class ProxyServer:
    """Caching proxy process.

    ``start()`` binds the listen address and spawns the acceptor, the master
    dispatcher, ``config.thread_pool_size`` workers and the flusher.
    """

    def __init__(self, config: Config, upstream: Optional[UpstreamClient] = None):
        self.config = config
        cache_dir = Path(config.cache_dir)
        self.store = CacheStore(cache_dir)
        self.coalescer = WriteCoalescer(cache_dir, config.rules)
        self.upstream = upstream or UpstreamClient(
            config.upstream_base_url, deadletter_dir=cache_dir / "deadletter")
        self.pool = WorkerPool(config.thread_pool_size, self._handle)
        self.counters = {"buffered_uploads": 0, "flushes": 0, "flush_failures": 0,
                         "rejected_connections": 0}
        self._counter_lock = threading.Lock()
        self._flush_queue: queue.Queue = queue.Queue()
        self._sock: Optional[socket.socket] = None
        self._stopping = threading.Event()
        self._threads: list[threading.Thread] = []
        self.address: Optional[tuple[str, int]] = None

    def count(self, name: str, n: int = 1) -> None:
        with self._counter_lock:
            self.counters[name] += n

    def start(self) -> "ProxyServer":
        host, port = split_host_port(self.config.listen_address)
        self._sock = socket.create_server((host, port), backlog=1024)
        self._sock.settimeout(0.2)
        self.address = self._sock.getsockname()[:2]
        self.pool.start()
        for target, name in ((self._accept_loop, "acceptor"), (self._flush_loop, "flusher")):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        log.info("listening on %s:%d with %d workers", *self.address, self.pool.pool_size)
        return self

    @property
    def url(self) -> str:
        return f"http://{self.address[0]}:{self.address[1]}"

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.settimeout(None)
            if not self.pool.submit(Task(conn, addr)):
                self.count("rejected_connections")
                try:
                    conn.sendall(b"HTTP/1.1 503 Service Unavailable\r\n"
                                 b"Content-Length: 0\r\nConnection: close\r\n\r\n")
                except OSError:
                    pass
                conn.close()

    def _handle(self, task: Task, worker_index: int) -> None:
        conn = task.connection
        try:
            ProxyRequestHandler(conn, task.address, self)
        except OSError as exc:
            log.debug("worker %d: connection error: %s", worker_index, exc)
        finally:
            try:
                conn.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            conn.close()

    # flushing

    def schedule_flush(self, batch: FlushBatch) -> None:
        self._flush_queue.put(batch)

    def _deliver(self, batch: FlushBatch) -> bool:
        try:
            self.upstream.bulk_write(batch)
        except BulkWriteFailed as exc:
            log.error("FlushFailed: %s", exc)
            self.count("flush_failures")
            return False
        self.count("flushes")
        return True

    def _flush_loop(self) -> None:
        period = self.coalescer.timer_period()
        while True:
            try:
                item = self._flush_queue.get(timeout=period)
            except queue.Empty:
                item = None
            if item is _STOP:
                self._flush_queue.task_done()
                return
            if item is not None:
                try:
                    self._deliver(item)
                finally:
                    self._flush_queue.task_done()
            for batch in self.coalescer.collect_expired():
                self._deliver(batch)

    def flush_all(self) -> int:
        """Drain every buffer and wait until all pending batches are delivered.

        Returns the number of batches that failed.
        """
        before = self.counters["flush_failures"]
        for batch in self.coalescer.drain_all():
            self._flush_queue.put(batch)
        self._flush_queue.join()
        return self.counters["flush_failures"] - before

    def shutdown(self) -> int:
        """Stop accepting, finish in-flight work, flush every buffer.

        Returns the number of batches that could not be delivered.
        """
        failures_before = self.counters["flush_failures"]
        self._stopping.set()
        if self._sock is not None:
            self._sock.close()
        for t in self._threads:
            if t.name == "acceptor":
                t.join()
        self.pool.close()
        self._flush_queue.put(_STOP)
        for t in self._threads:
            if t.name == "flusher":
                t.join()
        for batch in self.coalescer.drain_all():
            self._deliver(batch)
        return self.counters["flush_failures"] - failures_before

    def metrics_text(self) -> str:
        m = self.store.metrics
        values = {
            "hits": m.hits,
            "misses": m.misses,
            "expired_refreshes": m.expired_refreshes,
            "bytes_from_cache": m.bytes_from_cache,
            "bytes_total": m.bytes_total,
            "buffered_uploads": self.counters["buffered_uploads"],
            "flushes": self.counters["flushes"],
            "evictions": m.evictions,
            "flush_failures": self.counters["flush_failures"],
            "pending_uploads": self.coalescer.buffered_count,
            "used_bytes": self.store.used_bytes,
            "hit_rate": f"{m.hit_rate:.6f}",
            "byte_hit_rate": f"{m.byte_hit_rate:.6f}",
        }
        return "".join(f"{k} {v}\n" for k, v in values.items())

    def __enter__(self):
        return self.start() if self.address is None else self

    def __exit__(self, *exc):
        self.shutdown()


def replay_deadletter(config: Config, upstream: Optional[UpstreamClient] = None) -> tuple[int, int]:
    """Re-send dead-lettered batches. Returns (replayed, still_failing)."""
    dl_dir = Path(config.cache_dir) / "deadletter"
    upstream = upstream or UpstreamClient(config.upstream_base_url)
    by_digest = {path_digest(r.path): r.path for r in config.upload_rules}
    replayed = failed = 0
    for path in sorted(dl_dir.glob("*.log")) if dl_dir.exists() else []:
        digest = path.stem.rsplit("-", 1)[-1]
        rule_path = by_digest.get(digest)
        if rule_path is None:
            log.warning("no upload rule matches dead-letter file %s; skipping", path.name)
            failed += 1
            continue
        payloads, torn = decode_records(path.read_bytes())
        if torn:
            log.warning("%s has a torn trailing record; replaying %d intact payloads",
                        path.name, len(payloads))
        if not payloads:
            path.unlink()
            continue
        try:
            upstream.post_bulk(FlushBatch(rule_path, payloads, Trigger.SHUTDOWN))
        except UpstreamError as exc:
            log.error("replay of %s failed: %s", path.name, exc)
            failed += 1
            continue
        path.unlink()
        replayed += 1
    return replayed, failed
