"""Write-behind buffering of upload payloads.

Each upload rule owns one append-only log under ``<cache_dir>/buffers``.
A record is an 8-byte big-endian length followed by the payload bytes. A
buffer is drained into a :class:`FlushBatch` when it reaches the rule's
flush threshold, when its deadline (first arrival + TTL) passes, or at
shutdown.

Appends are not fsynced. A power failure can lose buffered payloads that
were still in dirty pages.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .config import CacheRule, RuleKind

log = logging.getLogger(__name__)

_LEN = struct.Struct(">Q")


class BufferWriteError(OSError):
    """The payload could not be appended; it was not buffered."""


class Trigger(enum.Enum):
    DEADLINE = "deadline"
    THRESHOLD = "threshold"
    SHUTDOWN = "shutdown"


@dataclass
class FlushBatch:
    rule_path: str
    payloads: list[bytes]
    trigger: Trigger

    def __len__(self):
        return len(self.payloads)


def encode_record(payload: bytes) -> bytes:
    return _LEN.pack(len(payload)) + payload


def encode_records(payloads: Iterable[bytes]) -> bytes:
    return b"".join(encode_record(p) for p in payloads)


def decode_records(data: bytes) -> tuple[list[bytes], bool]:
    """Split a log into payloads.

    Returns ``(payloads, torn)`` where ``torn`` is True if a trailing partial
    record was discarded.
    """
    payloads = []
    pos, end = 0, len(data)
    while pos < end:
        if end - pos < _LEN.size:
            return payloads, True
        (length,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size
        if end - pos < length:
            return payloads, True
        payloads.append(data[pos:pos + length])
        pos += length
    return payloads, False


def path_digest(rule_path: str) -> str:
    return hashlib.sha256(rule_path.encode("utf-8")).hexdigest()


@dataclass
class UploadBuffer:
    rule_path: str
    log_file: Path
    ttl_seconds: float
    flush_threshold: int
    count: int = 0
    first_arrival: Optional[float] = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def deadline(self) -> Optional[float]:
        if self.first_arrival is None:
            return None
        return self.first_arrival + self.ttl_seconds


class WriteCoalescer:
    def __init__(self, cache_dir, rules: Iterable[CacheRule], clock=time.monotonic):
        self.buffers_dir = Path(cache_dir) / "buffers"
        self.buffers_dir.mkdir(parents=True, exist_ok=True)
        self.clock = clock
        self.torn_records = 0
        self._buffers: dict[str, UploadBuffer] = {}
        for rule in rules:
            if rule.kind is not RuleKind.UPLOAD:
                continue
            buf = UploadBuffer(
                rule_path=rule.path,
                log_file=self.buffers_dir / f"{path_digest(rule.path)}.log",
                ttl_seconds=rule.ttl_seconds,
                flush_threshold=rule.flush_threshold,
            )
            self._recover(buf)
            self._buffers[rule.path] = buf

    def _recover(self, buf: UploadBuffer) -> None:
        # A crash mid-drain leaves the renamed log behind; fold it back in
        # ahead of anything appended since.
        pending = buf.log_file.with_suffix(".flushing")
        data = b""
        if pending.exists():
            data += pending.read_bytes()
        if buf.log_file.exists():
            data += buf.log_file.read_bytes()
        if not data:
            pending.unlink(missing_ok=True)
            return
        payloads, torn = decode_records(data)
        if torn:
            self.torn_records += 1
            log.warning("dropped a torn trailing record in %s", buf.log_file.name)
        buf.log_file.write_bytes(encode_records(payloads))
        pending.unlink(missing_ok=True)
        buf.count = len(payloads)
        if buf.count:
            buf.first_arrival = self.clock()
            log.info("recovered %d buffered uploads for %s", buf.count, buf.rule_path)

    def buffer(self, rule_path: str) -> UploadBuffer:
        return self._buffers[rule_path]

    @property
    def buffered_count(self) -> int:
        return sum(b.count for b in self._buffers.values())

    def buffer_upload(self, rule: CacheRule, payload: bytes, now: Optional[float] = None) -> Optional[FlushBatch]:
        """Append one payload to the rule's buffer.

        Returns None when the payload was buffered, or the drained batch when
        this payload brought the buffer to its flush threshold. Raises
        :class:`BufferWriteError` if the append failed.
        """
        buf = self._buffers[rule.path]
        now = self.clock() if now is None else now
        with buf.lock:
            try:
                with open(buf.log_file, "ab") as fh:
                    fh.write(encode_record(payload))
            except OSError as exc:
                raise BufferWriteError(f"cannot append to {buf.log_file}: {exc}") from exc
            if buf.count == 0:
                buf.first_arrival = now
            buf.count += 1
            if buf.count >= buf.flush_threshold:
                return self._drain(buf, Trigger.THRESHOLD)
        return None

    def _drain(self, buf: UploadBuffer, trigger: Trigger) -> Optional[FlushBatch]:
        # caller holds buf.lock
        if buf.count == 0:
            return None
        pending = buf.log_file.with_suffix(".flushing")
        os.replace(buf.log_file, pending)
        buf.count = 0
        buf.first_arrival = None
        payloads, torn = decode_records(pending.read_bytes())
        pending.unlink()
        if torn:
            self.torn_records += 1
            log.warning("dropped torn trailing record in %s buffer", buf.rule_path)
        if not payloads:
            return None
        return FlushBatch(buf.rule_path, payloads, trigger)

    def collect_expired(self, now: Optional[float] = None) -> list[FlushBatch]:
        now = self.clock() if now is None else now
        batches = []
        for buf in self._buffers.values():
            with buf.lock:
                deadline = buf.deadline
                if deadline is not None and deadline <= now:
                    batch = self._drain(buf, Trigger.DEADLINE)
                    if batch is not None:
                        batches.append(batch)
        return batches

    def drain_all(self) -> list[FlushBatch]:
        batches = []
        for buf in self._buffers.values():
            with buf.lock:
                batch = self._drain(buf, Trigger.SHUTDOWN)
                if batch is not None:
                    batches.append(batch)
        return batches

    def timer_period(self) -> float:
        ttls = [b.ttl_seconds for b in self._buffers.values()]
        return min([1.0] + [t / 10 for t in ttls])
