"""Administrator configuration file: parsing, validation, rule matching.

The format is line oriented::

    listen = 127.0.0.1:8080
    upstream = http://127.0.0.1:9000
    threads = 8
    max_cache_bytes = 1073741824
    cache_dir = /var/cache/coalesce

    [rule]
    path = /emails
    kind = upload
    ttl_seconds = 30
    flush_threshold = 10000

Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional
from urllib.parse import urlsplit

DEFAULT_FLUSH_THRESHOLD = 10_000

_TOP_LEVEL_KEYS = ("listen", "upstream", "threads", "max_cache_bytes", "cache_dir")
_RULE_KEYS = ("path", "kind", "ttl_seconds", "flush_threshold")


class ConfigError(ValueError):
    pass


class MalformedSyntax(ConfigError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class InvalidValue(ConfigError):
    pass


class DuplicateRule(ConfigError):
    pass


class RuleKind(enum.Enum):
    UPLOAD = "upload"
    DOWNLOAD = "download"


@dataclass(frozen=True)
class CacheRule:
    path: str
    kind: RuleKind
    ttl_seconds: float
    # None for download rules
    flush_threshold: Optional[int] = None

    def __post_init__(self):
        if not self.path.startswith("/"):
            raise InvalidValue(f"rule path must begin with '/': {self.path!r}")
        if not self.ttl_seconds > 0:
            raise InvalidValue(f"ttl_seconds must be > 0, got {self.ttl_seconds}")
        if self.kind is RuleKind.UPLOAD:
            if self.flush_threshold is None:
                object.__setattr__(self, "flush_threshold", DEFAULT_FLUSH_THRESHOLD)
            elif self.flush_threshold < 1:
                raise InvalidValue(
                    f"flush_threshold must be >= 1, got {self.flush_threshold}"
                )
        else:
            object.__setattr__(self, "flush_threshold", None)


@dataclass(frozen=True)
class Config:
    listen_address: str
    upstream_base_url: str
    thread_pool_size: int
    max_cache_bytes: int
    cache_dir: str
    rules: tuple[CacheRule, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        if self.thread_pool_size < 1:
            raise InvalidValue(f"threads must be >= 1, got {self.thread_pool_size}")
        if self.max_cache_bytes < 1:
            raise InvalidValue(f"max_cache_bytes must be >= 1, got {self.max_cache_bytes}")
        split_host_port(self.listen_address)
        parts = urlsplit(self.upstream_base_url)
        if parts.scheme != "http" or not parts.hostname:
            raise InvalidValue(f"upstream must be an absolute http:// URL: {self.upstream_base_url!r}")
        seen = set()
        for rule in self.rules:
            ident = (rule.path, rule.kind)
            if ident in seen:
                raise DuplicateRule(f"duplicate {rule.kind.value} rule for {rule.path!r}")
            seen.add(ident)

    @property
    def upload_rules(self) -> list[CacheRule]:
        return [r for r in self.rules if r.kind is RuleKind.UPLOAD]

    @property
    def download_rules(self) -> list[CacheRule]:
        return [r for r in self.rules if r.kind is RuleKind.DOWNLOAD]


def split_host_port(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host:
        raise InvalidValue(f"listen address must be host:port, got {address!r}")
    try:
        port_num = int(port)
    except ValueError:
        raise InvalidValue(f"invalid port in listen address {address!r}") from None
    if not 0 <= port_num <= 65535:
        raise InvalidValue(f"port out of range in listen address {address!r}")
    return host.strip("[]"), port_num


def _int(value: str, key: str, line: int, column: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise MalformedSyntax(f"{key} expects an integer, got {value!r}", line, column) from None


def _float(value: str, key: str, line: int, column: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise MalformedSyntax(f"{key} expects a number, got {value!r}", line, column) from None


def parse_config(text: str) -> Config:
    top: dict[str, str] = {}
    top_pos: dict[str, tuple[int, int]] = {}
    rule_blocks: list[tuple[int, dict[str, tuple[str, int, int]]]] = []
    current: Optional[dict[str, tuple[str, int, int]]] = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        indent = len(raw) - len(raw.lstrip())
        if stripped.startswith("["):
            if stripped != "[rule]":
                raise MalformedSyntax(f"unknown section {stripped!r}", lineno, indent + 1)
            current = {}
            rule_blocks.append((lineno, current))
            continue
        if "=" not in stripped:
            raise MalformedSyntax("expected 'key = value'", lineno, indent + 1)
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        after_eq = raw.index("=") + 1
        value_col = after_eq + len(raw[after_eq:]) - len(raw[after_eq:].lstrip()) + 1
        if not key:
            raise MalformedSyntax("missing key before '='", lineno, indent + 1)
        target_keys = _RULE_KEYS if current is not None else _TOP_LEVEL_KEYS
        if key not in target_keys:
            where = "[rule] block" if current is not None else "top level"
            raise MalformedSyntax(f"unknown key {key!r} at {where}", lineno, indent + 1)
        if current is not None:
            if key in current:
                raise MalformedSyntax(f"key {key!r} repeated in rule", lineno, indent + 1)
            current[key] = (value, lineno, value_col)
        else:
            if key in top:
                raise MalformedSyntax(f"key {key!r} repeated", lineno, indent + 1)
            top[key] = value
            top_pos[key] = (lineno, value_col)

    missing = [k for k in _TOP_LEVEL_KEYS if k not in top]
    if missing:
        raise InvalidValue(f"missing required keys: {', '.join(missing)}")

    rules = []
    for block_line, block in rule_blocks:
        for required in ("path", "kind", "ttl_seconds"):
            if required not in block:
                raise InvalidValue(f"[rule] at line {block_line} is missing {required!r}")
        kind_text, kl, kc = block["kind"]
        try:
            kind = RuleKind(kind_text.lower())
        except ValueError:
            raise MalformedSyntax(f"kind must be 'upload' or 'download', got {kind_text!r}", kl, kc) from None
        ttl_text, tl, tc = block["ttl_seconds"]
        ttl = _float(ttl_text, "ttl_seconds", tl, tc)
        threshold = None
        if "flush_threshold" in block:
            ft_text, fl, fc = block["flush_threshold"]
            threshold = _int(ft_text, "flush_threshold", fl, fc)
        rules.append(CacheRule(block["path"][0], kind, ttl, threshold))

    return Config(
        listen_address=top["listen"],
        upstream_base_url=top["upstream"].rstrip("/"),
        thread_pool_size=_int(top["threads"], "threads", *top_pos["threads"]),
        max_cache_bytes=_int(top["max_cache_bytes"], "max_cache_bytes", *top_pos["max_cache_bytes"]),
        cache_dir=top["cache_dir"],
        rules=tuple(rules),
    )


def serialize_config(config: Config) -> str:
    lines = [
        f"listen = {config.listen_address}",
        f"upstream = {config.upstream_base_url}",
        f"threads = {config.thread_pool_size}",
        f"max_cache_bytes = {config.max_cache_bytes}",
        f"cache_dir = {config.cache_dir}",
    ]
    for rule in config.rules:
        lines += ["", "[rule]", f"path = {rule.path}", f"kind = {rule.kind.value}",
                  f"ttl_seconds = {rule.ttl_seconds!r}"]
        if rule.flush_threshold is not None:
            lines.append(f"flush_threshold = {rule.flush_threshold}")
    return "\n".join(lines) + "\n"


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def match_rule(config: Config, method: str, path: str) -> Optional[CacheRule]:
    """Return the rule that makes this request cacheable, or None to forward it.

    ``path`` may still carry a query string; it is ignored for matching.
    """
    path = path.split("?", 1)[0]
    method = method.upper()
    if method == "POST":
        kind = RuleKind.UPLOAD
    elif method == "GET":
        kind = RuleKind.DOWNLOAD
    else:
        return None
    for rule in config.rules:
        if rule.kind is kind and rule.path == path:
            return rule
    return None
