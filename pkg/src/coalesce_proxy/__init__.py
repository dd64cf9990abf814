"""Caching HTTP proxy that buffers uploads on disk and bulk-writes them upstream."""

from .cache_store import CacheMetrics, CacheStore, CachedEntry, LookupResult, Status
from .coalescer import FlushBatch, Trigger, UploadBuffer, WriteCoalescer
from .config import CacheRule, Config, RuleKind, load_config, match_rule, parse_config, serialize_config
from .pool import RoundRobin, Task, WorkerPool
from .server import ProxyServer
from .upstream import UpstreamClient

__version__ = "0.1.0"
