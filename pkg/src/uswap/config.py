"""Flat ``key = value`` configuration shared by every component.

Keys are dotted strings (``lwt.switch_ns``).  Values are coerced to the type of
the default, so a config file only ever contains plain text.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Iterator, Mapping

DEFAULTS: dict[str, Any] = {
    # simclock
    "clock.mode": "virtual",
    "clock.wall_scale": 1.0,
    # lwt_runtime
    "lwt.switch_ns": 500,
    "lwt.stack_budget_bytes": 32768,
    "lwt.cap_per_lane": 10,
    "lanes": 1,
    # fault_engine
    "fault.notify_profile": "table",
    "fault.shards": 32,
    "fault.shard_lock_ns": 0,
    "fault.pf_entry_ns": 200,
    "mem.access_ns": 100,
    # swap_core
    "swap.flush_threshold_pages": 64,
    "swap.flush_interval_us": 1000,
    "swap.readahead_pages": 8,
    "swap.prefetchers": 4,
    "swap.prefetch": True,
    "swap.prefetch_on_cache_hit": True,
    "swap.prefetch_queue_cap": 256,
    "swap.lookup_ns": 300,
    "swap.map_ns": 2000,
    "swap.unmap_ns": 1000,
    "swap.mode": "lwt",
    # backend_store
    "store.backend": "remote",
    "store.read_ns.remote": 5000,
    "store.read_ns.ssd": 25000,
    "store.write_setup_ns.remote": 2000,
    "store.write_page_ns.remote": 5000,
    "store.write_setup_ns.ssd": 20000,
    "store.write_page_ns.ssd": 8000,
    "store.block_bytes": 1 << 30,
    "store.alloc_ns": 50000,
    "store.daemon_blocks": 64,
    "store.index_buckets": 1 << 16,
    "store.log_path": "",
    # coldscan
    "scan.interval_us": 10000,
    "scan.low_mem_threshold_pages": 64,
    # cache_app
    "app.op_ns": 1000,
    "app.request_ns": 0,
    "app.protect": "get",
    "app.meta_pages": 64,
    "app.arena_pages": 4096,
    # fault_tolerance
    "inject.swapin_errors": 0,
    "inject.uce_errors": 0,
    "inject.seed": 1,
}


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS.get(key)
    if default is None or not isinstance(value, str):
        return value
    if isinstance(default, bool):
        lowered = value.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(float(value)) if "e" in value.lower() else int(value, 0)
    if isinstance(default, float):
        return float(value)
    return value.strip()


class Config(Mapping[str, Any]):
    """Immutable view over defaults plus overrides."""

    def __init__(self, overrides: Mapping[str, Any] | None = None):
        values = dict(DEFAULTS)
        for key, value in (overrides or {}).items():
            values[key] = _coerce(key, value)
        self._values = values

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "Config":
        merged = dict(self._values)
        merged.update(overrides)
        return Config(merged)

    @classmethod
    def from_file(cls, path: str | Path, overrides: Mapping[str, Any] | None = None) -> "Config":
        return cls({**parse_config_text(Path(path).read_text()), **(overrides or {})})


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
