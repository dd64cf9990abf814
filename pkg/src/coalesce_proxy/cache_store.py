"""Disk-resident download cache with TTL expiry and LRU eviction.

Bodies live as raw files under ``<cache_dir>/objects/<sha256(key)>``. The
index is kept in memory only and rebuilt from a directory scan at startup,
so reads and writes go through the OS page cache and there is no metadata
store to keep consistent.

Capacity is enforced lazily: callers run :meth:`CacheStore.enforce_capacity`
at the start of each request, and writes made while handling that request
may overshoot the cap until the next call.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import os
import tempfile
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

log = logging.getLogger(__name__)


def key_digest(key: str) -> str:
    return hashlib.sha256(key.encode("utf-8")).hexdigest()


class DiskWriteFailed(OSError):
    pass


@dataclass
class CachedEntry:
    key: str
    file_path: Path
    size_bytes: int
    stored_at: float
    ttl_seconds: float
    last_access: float

    def is_expired(self, now: float) -> bool:
        # equality is still fresh
        return now - self.stored_at > self.ttl_seconds


@dataclass
class CacheMetrics:
    hits: int = 0
    misses: int = 0
    expired_refreshes: int = 0
    bytes_from_cache: int = 0
    bytes_total: int = 0
    evictions: int = 0
    vanished_files: int = 0

    @property
    def hit_rate(self) -> float:
        lookups = self.hits + self.misses + self.expired_refreshes
        return self.hits / lookups if lookups else 0.0

    @property
    def byte_hit_rate(self) -> float:
        return self.bytes_from_cache / self.bytes_total if self.bytes_total else 0.0


class Status(enum.Enum):
    HIT = "hit"
    EXPIRED = "expired"
    MISS = "miss"


@dataclass(frozen=True)
class LookupResult:
    status: Status
    body: Optional[bytes] = None


MISS = LookupResult(Status.MISS)
EXPIRED = LookupResult(Status.EXPIRED)


class CacheStore:
    def __init__(self, cache_dir, clock=time.time):
        self.objects_dir = Path(cache_dir) / "objects"
        self.objects_dir.mkdir(parents=True, exist_ok=True)
        self.clock = clock
        self.metrics = CacheMetrics()
        self._index: dict[str, CachedEntry] = {}
        self._used_bytes = 0
        self._lock = threading.RLock()
        self._key_locks: dict[str, threading.Lock] = {}
        self._rescan()

    def _rescan(self):
        for child in self.objects_dir.iterdir():
            if child.name.startswith(".tmp"):
                child.unlink(missing_ok=True)
                continue
            st = child.stat()
            # Keys and TTLs are not persisted: entries come back expired and
            # are refreshed (and re-keyed) on first access.
            self._index[child.name] = CachedEntry(
                key=child.name,
                file_path=child,
                size_bytes=st.st_size,
                stored_at=st.st_mtime,
                ttl_seconds=0.0,
                last_access=st.st_mtime,
            )
            self._used_bytes += st.st_size

    @property
    def used_bytes(self) -> int:
        return self._used_bytes

    def __len__(self):
        return len(self._index)

    def __contains__(self, key: str) -> bool:
        return key_digest(key) in self._index

    def keys(self) -> list[str]:
        with self._lock:
            return [e.key for e in self._index.values()]

    def entry(self, key: str) -> Optional[CachedEntry]:
        return self._index.get(key_digest(key))

    def _drop(self, digest: str) -> None:
        entry = self._index.pop(digest, None)
        if entry is not None:
            self._used_bytes -= entry.size_bytes
            entry.file_path.unlink(missing_ok=True)

    def _read(self, digest: str, entry: CachedEntry) -> Optional[bytes]:
        try:
            return entry.file_path.read_bytes()
        except FileNotFoundError:
            log.warning("cache file for %r vanished; repairing index", entry.key)
            self.metrics.vanished_files += 1
            self._drop(digest)
            return None

    def lookup(self, key: str, now: Optional[float] = None) -> LookupResult:
        now = self.clock() if now is None else now
        digest = key_digest(key)
        with self._lock:
            entry = self._index.get(digest)
            if entry is None:
                self.metrics.misses += 1
                return MISS
            if entry.is_expired(now):
                self.metrics.expired_refreshes += 1
                return EXPIRED
            body = self._read(digest, entry)
            if body is None:
                self.metrics.misses += 1
                return MISS
            entry.last_access = now
            self.metrics.hits += 1
            self.metrics.bytes_from_cache += len(body)
            self.metrics.bytes_total += len(body)
            return LookupResult(Status.HIT, body)

    def peek_fresh(self, key: str, now: Optional[float] = None) -> Optional[bytes]:
        """Fresh body for ``key`` without touching metrics or recency."""
        now = self.clock() if now is None else now
        digest = key_digest(key)
        with self._lock:
            entry = self._index.get(digest)
            if entry is None or entry.is_expired(now):
                return None
            return self._read(digest, entry)

    def peek_stale(self, key: str) -> Optional[bytes]:
        digest = key_digest(key)
        with self._lock:
            entry = self._index.get(digest)
            return None if entry is None else self._read(digest, entry)

    def note_served(self, nbytes: int) -> None:
        """Account bytes served to a client that did not come from the cache."""
        with self._lock:
            self.metrics.bytes_total += nbytes

    def put(self, key: str, body: bytes, ttl_seconds: float, now: Optional[float] = None) -> None:
        now = self.clock() if now is None else now
        digest = key_digest(key)
        final = self.objects_dir / digest
        try:
            fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=self.objects_dir)
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(body)
                os.replace(tmp, final)
            except BaseException:
                Path(tmp).unlink(missing_ok=True)
                raise
        except OSError as exc:
            with self._lock:
                # the old file may or may not survive; keep index and disk in step
                self._drop(digest)
            raise DiskWriteFailed(f"could not cache {key!r}: {exc}") from exc
        with self._lock:
            old = self._index.get(digest)
            if old is not None:
                self._used_bytes -= old.size_bytes
            self._index[digest] = CachedEntry(
                key=key,
                file_path=final,
                size_bytes=len(body),
                stored_at=now,
                ttl_seconds=ttl_seconds,
                last_access=now,
            )
            self._used_bytes += len(body)

    def enforce_capacity(self, max_cache_bytes: int, now: Optional[float] = None) -> list[str]:
        """Evict least recently used entries until ``used_bytes <= max_cache_bytes``.

        Returns the evicted keys in eviction order. Ties on ``last_access``
        go to the lexicographically smaller key.
        """
        evicted = []
        with self._lock:
            if self._used_bytes <= max_cache_bytes:
                return evicted
            order = sorted(self._index.items(), key=lambda kv: (kv[1].last_access, kv[1].key))
            for digest, entry in order:
                if self._used_bytes <= max_cache_bytes:
                    break
                self._drop(digest)
                evicted.append(entry.key)
                self.metrics.evictions += 1
        return evicted

    def rescan_used_bytes(self) -> int:
        """Sum of on-disk sizes of all indexed files."""
        with self._lock:
            return sum(e.file_path.stat().st_size for e in self._index.values())

    @contextmanager
    def refresh_guard(self, key: str):
        """Serialize refreshes of one key across workers (single-flight)."""
        with self._lock:
            lock = self._key_locks.setdefault(key, threading.Lock())
        with lock:
            yield
