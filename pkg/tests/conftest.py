import http.client
import threading
from collections import Counter
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlsplit

import pytest

from coalesce_proxy.config import CacheRule, Config, RuleKind
from coalesce_proxy.server import ProxyServer

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, text in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {text}")


class FakeUpstream:
    """Scriptable origin server.

    ``routes[(method, path)]`` is ``(status, headers, body)`` or a callable
    taking the handler and returning that triple. Every request is recorded.
    """

    def __init__(self):
        self.routes = {}
        self.requests = []
        self.counts = Counter()
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):
                pass

            def _any(self):
                n = int(self.headers.get("Content-Length", 0) or 0)
                body = self.rfile.read(n) if n else b""
                path = self.path.split("?", 1)[0]
                with outer._lock:
                    outer.requests.append((self.command, self.path, dict(self.headers), body))
                    outer.counts[(self.command, path)] += 1
                route = outer.routes.get((self.command, path))
                if route is None:
                    route = (404, [("Content-Type", "text/plain")], b"no route\n")
                elif callable(route):
                    route = route(self, body)
                status, headers, payload = route
                self.send_response(status)
                for k, v in headers:
                    self.send_header(k, v)
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                if self.command != "HEAD":
                    self.wfile.write(payload)

            do_GET = do_POST = do_PUT = do_DELETE = do_HEAD = do_PATCH = _any

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.httpd.daemon_threads = True
        self.thread = threading.Thread(target=self.httpd.serve_forever,
                                       kwargs={"poll_interval": 0.05}, daemon=True)

    @property
    def url(self):
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self):
        self.thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def upstream():
    up = FakeUpstream().start()
    yield up
    up.stop()


def request(base_url, method, path, body=None, headers=None):
    """Returns (status, headers list, body)."""
    parts = urlsplit(base_url)
    conn = http.client.HTTPConnection(parts.hostname, parts.port, timeout=30)
    try:
        conn.request(method, path, body, headers or {})
        resp = conn.getresponse()
        return resp.status, resp.getheaders(), resp.read()
    finally:
        conn.close()


def make_config(upstream_url, cache_dir, rules=(), threads=4, max_cache_bytes=1 << 30):
    return Config(
        listen_address="127.0.0.1:0",
        upstream_base_url=upstream_url,
        thread_pool_size=threads,
        max_cache_bytes=max_cache_bytes,
        cache_dir=str(cache_dir),
        rules=tuple(rules),
    )


@pytest.fixture
def start_proxy(tmp_path):
    started = []

    def _start(upstream_url, rules=(), **kw):
        config = make_config(upstream_url, tmp_path / f"cache{len(started)}", rules, **kw)
        proxy = ProxyServer(config).start()
        started.append(proxy)
        return proxy

    yield _start
    for proxy in started:
        if not proxy._stopping.is_set():
            proxy.shutdown()


def upload_rule(path, ttl=3600.0, threshold=None):
    return CacheRule(path, RuleKind.UPLOAD, ttl, threshold)


def download_rule(path, ttl=60.0):
    return CacheRule(path, RuleKind.DOWNLOAD, ttl)
