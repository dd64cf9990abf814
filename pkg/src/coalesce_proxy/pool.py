"""Fixed worker pool fed round-robin from a shared task queue.

An acceptor thread puts connections on the shared queue; a master thread
takes them off and hands each to the worker at ``next_index``, then
advances the index. Only the master mutates the index.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

log = logging.getLogger(__name__)

ACCEPT_QUEUE_LIMIT = 1024
_STOP = object()


@dataclass
class Task:
    connection: Any
    address: Any = None
    arrival: float = field(default_factory=time.monotonic)


class RoundRobin:
    """The dispatcher's next-worker index."""

    def __init__(self, pool_size: int):
        if pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        self.pool_size = pool_size
        self.next_index = 0

    def assign_next_worker(self) -> int:
        index = self.next_index
        self.next_index = (index + 1) % self.pool_size
        return index


class WorkerPool:
    def __init__(self, pool_size: int, handler: Callable[[Task, int], None],
                 accept_limit: int = ACCEPT_QUEUE_LIMIT, worker_queue_limit: int = ACCEPT_QUEUE_LIMIT):
        self.rr = RoundRobin(pool_size)
        self.handler = handler
        self.accept_queue: queue.Queue = queue.Queue(maxsize=accept_limit)
        self.worker_queues = [queue.Queue(maxsize=worker_queue_limit) for _ in range(pool_size)]
        self.assigned = [0] * pool_size
        self.enqueued = 0
        self.completed = 0
        self._count_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._closed = False

    @property
    def pool_size(self) -> int:
        return self.rr.pool_size

    @property
    def in_flight(self) -> int:
        with self._count_lock:
            return self.enqueued - self.completed

    def start(self) -> None:
        self._threads.append(threading.Thread(target=self._master, name="master", daemon=True))
        for i in range(self.pool_size):
            self._threads.append(
                threading.Thread(target=self._worker, args=(i,), name=f"worker-{i}", daemon=True)
            )
        for t in self._threads:
            t.start()

    def submit(self, task: Task) -> bool:
        """Enqueue a task; False if the pool is closed or the queue is full."""
        if self._closed:
            return False
        try:
            self.accept_queue.put_nowait(task)
        except queue.Full:
            return False
        with self._count_lock:
            self.enqueued += 1
        return True

    def _master(self) -> None:
        while True:
            task = self.accept_queue.get()
            if task is _STOP:
                for q in self.worker_queues:
                    q.put(_STOP)
                return
            index = self.rr.assign_next_worker()
            self.assigned[index] += 1
            self.worker_queues[index].put(task)

    def _worker(self, index: int) -> None:
        q = self.worker_queues[index]
        while True:
            task = q.get()
            if task is _STOP:
                return
            try:
                self.handler(task, index)
            except Exception:
                log.exception("worker %d: unhandled error", index)
            finally:
                with self._count_lock:
                    self.completed += 1

    def close(self, timeout: float = None) -> None:
        """Stop accepting, let queued and in-flight tasks finish, join threads."""
        if self._closed:
            return
        self._closed = True
        self.accept_queue.put(_STOP)
        for t in self._threads:
            t.join(timeout)
