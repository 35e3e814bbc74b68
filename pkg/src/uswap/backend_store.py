"""Key-value paging store keyed by ``(app_id, vpn)``.

Two backends sit behind one index:

* ``ssd``    -- an append-only log of page records (in memory in virtual mode,
  an ``O_APPEND`` file in wall mode), reclaimed by :meth:`BackendStore.compact_log`.
* ``remote`` -- 4 KiB slots carved out of 1 GiB blocks leased from a
  memory-server daemon.

The index is two tables: a direct-mapped primary table, and a chained conflict
table for keys whose primary bucket is taken by another key.

Log record layout, little-endian::

    magic u32 | app_id u32 | vpn u64 | length u32 | fnv1a64(body) u64 | body

The header is padded to 4 KiB so every record and body offset stays page aligned.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Any, Callable, Iterable

import numpy as np

from .config import Config
from .errors import (BatchWriteError, ChecksumMismatch, DaemonOutOfMemory,
                     InjectedDeviceError, KeyNotFound, OutOfSpace)
from .simclock import SimClock

PAGE_SIZE = 4096
MAGIC = 0x4C535750
HEADER = struct.Struct("<IIQIQ")
HEADER_BLOCK = PAGE_SIZE
RECORD_BYTES = HEADER_BLOCK + PAGE_SIZE

Key = tuple[int, int]

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a_py(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


try:
    from numba import njit

    @njit(cache=True)
    def _fnv1a_nb(buf):  # pragma: no cover - compiled
        h = np.uint64(0xCBF29CE484222325)
        prime = np.uint64(0x100000001B3)
        for i in range(buf.shape[0]):
            h = (h ^ np.uint64(buf[i])) * prime
        return h

    def fnv1a64(data: bytes) -> int:
        return int(_fnv1a_nb(np.frombuffer(data, dtype=np.uint8)))

except ImportError:  # pragma: no cover
    fnv1a64 = _fnv1a_py


def mix64(app_id: int, vpn: int) -> int:
    """splitmix64 finaliser over the packed key."""
    z = ((app_id << 40) ^ vpn) & 0xFFFFFFFFFFFFFFFF
    z = (z + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


@dataclass(frozen=True, slots=True)
class PageLocation:
    backend: str  # "ssd" | "remote"
    log_offset: int = 0
    region_id: int = 0
    offset: int = 0


def encode_record(key: Key, body: bytes) -> bytes:
    """Header (padded to a page) + body, as laid out in the log file."""
    header = HEADER.pack(MAGIC, key[0], key[1], len(body), fnv1a64(body))
    return header + bytes(HEADER_BLOCK - HEADER.size) + body


def decode_record(raw: bytes) -> tuple[Key, bytes, int]:
    magic, app_id, vpn, length, checksum = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ChecksumMismatch(f"bad magic {magic:#x}")
    body = raw[HEADER_BLOCK:HEADER_BLOCK + length]
    return (app_id, vpn), body, checksum


class KvIndex:
    """Direct-mapped primary table plus chained conflict table."""

    def __init__(self, buckets: int = 1 << 16, hash_fn: Callable[[int, int], int] = mix64,
                 conflict_buckets: int | None = None):
        if buckets & (buckets - 1):
            raise ValueError("bucket count must be a power of two")
        self.buckets = buckets
        self.hash_fn = hash_fn
        self._keys: list[Key | None] = [None] * buckets
        self._locs: list[PageLocation | None] = [None] * buckets
        self.conflict_buckets = conflict_buckets or max(buckets // 4, 1)
        self.conflict: dict[int, list[list]] = {}
        self.count = 0

    def _slot(self, key: Key) -> int:
        return self.hash_fn(key[0], key[1]) & (self.buckets - 1)

    def _chain(self, key: Key) -> int:
        return (self.hash_fn(key[0], key[1]) >> 32) % self.conflict_buckets

    def _find_conflict(self, key: Key) -> tuple[list | None, int]:
        chain = self.conflict.get(self._chain(key))
        if chain:
            for i, entry in enumerate(chain):
                if entry[0] == key:
                    return chain, i
        return chain, -1

    def get(self, key: Key) -> PageLocation | None:
        slot = self._slot(key)
        if self._keys[slot] == key:
            return self._locs[slot]
        chain, i = self._find_conflict(key)
        return chain[i][1] if i >= 0 else None

    def __contains__(self, key: Key) -> bool:
        return self.get(key) is not None

    def set(self, key: Key, loc: PageLocation) -> PageLocation | None:
        """Insert or replace; returns the previous location."""
        slot = self._slot(key)
        if self._keys[slot] == key:
            old = self._locs[slot]
            self._locs[slot] = loc
            return old
        chain, i = self._find_conflict(key)
        if i >= 0:
            old = chain[i][1]
            chain[i][1] = loc
            return old
        if self._keys[slot] is None:
            self._keys[slot] = key
            self._locs[slot] = loc
        else:
            self.conflict.setdefault(self._chain(key), []).append([key, loc])
        self.count += 1
        return None

    def delete(self, key: Key) -> PageLocation:
        slot = self._slot(key)
        if self._keys[slot] == key:
            old = self._locs[slot]
            self._keys[slot] = None
            self._locs[slot] = None
            self.count -= 1
            return old
        chain, i = self._find_conflict(key)
        if i < 0:
            raise KeyNotFound(key)
        old = chain.pop(i)[1]
        if not chain:
            del self.conflict[self._chain(key)]
        self.count -= 1
        return old

    def in_primary(self, key: Key) -> bool:
        return self._keys[self._slot(key)] == key

    def in_conflict(self, key: Key) -> bool:
        return self._find_conflict(key)[1] >= 0

    def items(self) -> Iterable[tuple[Key, PageLocation]]:
        for key, loc in zip(self._keys, self._locs):
            if key is not None:
                yield key, loc
        for chain in self.conflict.values():
            for key, loc in chain:
                yield key, loc

    def __len__(self) -> int:
        return self.count


class SsdLog:
    """Append-only record log; latest record per key wins."""

    def __init__(self, path: str | None = None, capacity_bytes: int | None = None):
        self.path = path
        self.capacity = capacity_bytes
        self.head = 0
        self.live_bytes = 0
        self.appends = 0
        self._records: dict[int, bytes] = {}
        self._fd: int | None = None
        if path:
            self._fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_APPEND | os.O_TRUNC, 0o644)

    def append(self, key: Key, body: bytes) -> int:
        if self.capacity is not None and self.head + RECORD_BYTES > self.capacity:
            raise OutOfSpace("log full")
        offset = self.head
        raw = encode_record(key, body)
        if self._fd is not None:
            os.write(self._fd, raw)
        else:
            self._records[offset] = raw
        self.head += RECORD_BYTES
        self.appends += 1
        return offset

    def read(self, offset: int) -> tuple[Key, bytes]:
        if self._fd is not None:
            raw = os.pread(self._fd, RECORD_BYTES, offset)
        else:
            raw = self._records[offset]
        key, body, checksum = decode_record(raw)
        if fnv1a64(body) != checksum:
            raise ChecksumMismatch(f"record at {offset} for {key}")
        return key, body

    def raw(self, offset: int) -> bytes:
        if self._fd is not None:
            return os.pread(self._fd, RECORD_BYTES, offset)
        return self._records[offset]

    def corrupt(self, offset: int) -> None:
        """Flip a body byte (test helper)."""
        raw = bytearray(self.raw(offset))
        raw[HEADER_BLOCK] ^= 0xFF
        if self._fd is not None:
            os.pwrite(self._fd, bytes(raw), offset)
        else:
            self._records[offset] = bytes(raw)

    def retire(self, offset: int) -> None:
        """Mark a superseded record dead.  The in-memory log frees it now;
        offsets and ``head`` are unchanged, so compaction accounting holds."""
        self.live_bytes -= RECORD_BYTES
        if self._fd is None:
            self._records.pop(offset, None)

    def offsets(self) -> list[int]:
        return list(range(0, self.head, RECORD_BYTES))

    def rewrite(self, records: list[tuple[Key, bytes]]) -> list[int]:
        """Replace the log with ``records`` (already checksummed raw bytes)."""
        self._records = {}
        self.head = 0
        if self._fd is not None:
            os.ftruncate(self._fd, 0)
        return [self.append_raw(raw) for _, raw in records]

    def append_raw(self, raw: bytes) -> int:
        offset = self.head
        if self._fd is not None:
            os.write(self._fd, raw)
        else:
            self._records[offset] = raw
        self.head += RECORD_BYTES
        return offset

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None


class MemoryServerDaemon:
    """Hands out whole 1 GiB blocks, each a (region_id, base) pair."""

    def __init__(self, capacity_blocks: int = 64, block_bytes: int = 1 << 30):
        self.capacity_blocks = capacity_blocks
        self.block_bytes = block_bytes
        self.allocated = 0
        self.requests = 0

    def allocate(self) -> tuple[int, int]:
        self.requests += 1
        if self.allocated >= self.capacity_blocks:
            raise DaemonOutOfMemory(f"daemon exhausted after {self.allocated} blocks")
        region_id = self.allocated
        self.allocated += 1
        return region_id, 0


class RemoteMemoryPool:
    def __init__(self, daemon: MemoryServerDaemon):
        self.daemon = daemon
        self.block_bytes = daemon.block_bytes
        self.slots_per_block = daemon.block_bytes // PAGE_SIZE
        self.blocks: list[tuple[int, int]] = []
        self.free_map: list[np.ndarray] = []
        self._free: list[tuple[int, int]] = []
        self._high_water = 0  # next never-used slot in the newest block
        self._data: dict[tuple[int, int], bytes] = {}

    def add_block(self) -> tuple[int, int]:
        region_id, base = self.daemon.allocate()
        self.blocks.append((region_id, base))
        self.free_map.append(np.ones(self.slots_per_block, dtype=bool))
        self._high_water = 0
        return region_id, base

    def alloc_slot(self) -> tuple[int, int] | None:
        if self._free:
            region_id, offset = self._free.pop()
        elif self.blocks and self._high_water < self.slots_per_block:
            region_id = self.blocks[-1][0]
            offset = self.blocks[-1][1] + self._high_water * PAGE_SIZE
            self._high_water += 1
        else:
            return None
        self.free_map[region_id][offset // PAGE_SIZE] = False
        return region_id, offset

    def free_slot(self, region_id: int, offset: int) -> None:
        self.free_map[region_id][offset // PAGE_SIZE] = True
        self._data.pop((region_id, offset), None)
        self._free.append((region_id, offset))

    def write(self, region_id: int, offset: int, body: bytes) -> None:
        self._data[(region_id, offset)] = body

    def read(self, region_id: int, offset: int) -> bytes:
        return self._data[(region_id, offset)]


class BackendStore:
    """Unified put/get/delete over one backend, with virtual latencies."""

    def __init__(self, clock: SimClock | None = None, config: Config | None = None,
                 backend: str | None = None, index: KvIndex | None = None,
                 log_capacity_bytes: int | None = None):
        self.clock = clock
        self.config = config or Config()
        self.backend = backend or self.config["store.backend"]
        if self.backend not in ("ssd", "remote"):
            raise ValueError(f"unknown backend {self.backend!r}")
        cfg = self.config
        self.read_ns: int = cfg[f"store.read_ns.{self.backend}"]
        self.write_setup_ns: int = cfg[f"store.write_setup_ns.{self.backend}"]
        self.write_page_ns: int = cfg[f"store.write_page_ns.{self.backend}"]
        self.alloc_ns: int = cfg["store.alloc_ns"]
        self.index = index if index is not None else KvIndex(cfg["store.index_buckets"])
        self.log: SsdLog | None = None
        self.pool: RemoteMemoryPool | None = None
        if self.backend == "ssd":
            path = cfg["store.log_path"] if (clock is not None and clock.mode == "wall") else ""
            self.log = SsdLog(path or None, log_capacity_bytes)
        else:
            self.daemon = MemoryServerDaemon(cfg["store.daemon_blocks"], cfg["store.block_bytes"])
            self.pool = RemoteMemoryPool(self.daemon)
        # fault injection: fail(op, key) -> True to raise InjectedDeviceError
        self.fail: Callable[[str, Key], bool] | None = None
        self.reads = 0
        self.writes = 0
        self.batches = 0
        self.read_ns_total = 0
        self.write_ns_total = 0
        self.alloc_ns_total = 0
        self.last_latency_ns = 0

    # latency model ------------------------------------------------------
    def batch_write_ns(self, npages: int) -> int:
        return self.write_setup_ns + self.write_page_ns * npages if npages else 0

    # operations ---------------------------------------------------------
    def alloc_remote_block(self) -> tuple[int, int]:
        if self.pool is None:
            raise TypeError("not a remote store")
        region = self.pool.add_block()
        self.alloc_ns_total += self.alloc_ns
        return region

    def _check_page(self, body: bytes) -> bytes:
        if len(body) != PAGE_SIZE:
            raise ValueError(f"page must be {PAGE_SIZE} bytes, got {len(body)}")
        return bytes(body)

    def _write_one(self, key: Key, body: bytes) -> PageLocation:
        if self.fail is not None and self.fail("put", key):
            raise InjectedDeviceError(f"write {key}")
        if self.log is not None:
            loc = PageLocation("ssd", log_offset=self.log.append(key, body))
            old = self.index.set(key, loc)
            if old is not None:
                self.log.retire(old.log_offset)
            self.log.live_bytes += RECORD_BYTES
            return loc
        pool = self.pool
        old = self.index.get(key)
        if old is not None:
            pool.write(old.region_id, old.offset, body)
            return old
        slot = pool.alloc_slot()
        if slot is None:
            try:
                self.alloc_remote_block()
            except DaemonOutOfMemory as exc:
                raise OutOfSpace(str(exc)) from exc
            slot = pool.alloc_slot()
        loc = PageLocation("remote", region_id=slot[0], offset=slot[1])
        pool.write(slot[0], slot[1], body)
        self.index.set(key, loc)
        return loc

    def put(self, key: Key, page: bytes) -> PageLocation:
        return self.put_batch([(key, page)])[0]

    def put_batch(self, items: list[tuple[Key, bytes]]) -> list[PageLocation]:
        """Write every page; charges ``batch_write_ns(len(items))``."""
        locations: dict[Key, PageLocation] = {}
        failures: dict[Key, BaseException] = {}
        for key, page in items:
            body = self._check_page(page)
            try:
                locations[key] = self._write_one(key, body)
            except InjectedDeviceError as exc:
                failures[key] = exc
        self.writes += len(locations)
        self.batches += 1
        latency = self.batch_write_ns(len(items))
        self.write_ns_total += latency
        self.last_latency_ns = latency
        if failures:
            raise BatchWriteError(locations, failures)
        return [locations[key] for key, _ in items]

    def get(self, key: Key) -> bytes:
        loc = self.index.get(key)
        if loc is None:
            raise KeyNotFound(key)
        if self.fail is not None and self.fail("get", key):
            raise InjectedDeviceError(f"read {key}")
        self.reads += 1
        self.read_ns_total += self.read_ns
        self.last_latency_ns = self.read_ns
        if self.log is not None:
            stored_key, body = self.log.read(loc.log_offset)
            if stored_key != key:
                raise ChecksumMismatch(f"log record {loc.log_offset} belongs to {stored_key}")
            return body
        return self.pool.read(loc.region_id, loc.offset)

    def delete(self, key: Key) -> None:
        loc = self.index.delete(key)
        if self.log is not None:
            self.log.retire(loc.log_offset)
        else:
            self.pool.free_slot(loc.region_id, loc.offset)

    def __contains__(self, key: Key) -> bool:
        return key in self.index

    def location(self, key: Key) -> PageLocation | None:
        return self.index.get(key)

    def compact_log(self) -> int:
        """Copy live records forward into a fresh log; returns reclaimed bytes."""
        if self.log is None:
            return 0
        log = self.log
        live = sorted(((loc.log_offset, key) for key, loc in self.index.items()))
        before = log.head
        raws = [(key, log.raw(offset)) for offset, key in live]
        new_offsets = log.rewrite(raws)
        for (_, key), offset in zip(live, new_offsets):
            self.index.set(key, PageLocation("ssd", log_offset=offset))
        log.live_bytes = log.head
        return before - log.head

    # async wrappers on the virtual clock --------------------------------
    def get_async(self, key: Key, done: Callable[[Any, BaseException | None], None]) -> None:
        """Complete ``done(bytes, None)`` or ``done(None, exc)`` after the read latency."""
        try:
            value, exc = self.get(key), None
        except (KeyNotFound, ChecksumMismatch, InjectedDeviceError) as err:
            value, exc = None, err
        self.clock.call_later(self.read_ns, done, value, exc)

    def put_batch_async(self, items: list[tuple[Key, bytes]],
                        done: Callable[[Any, BaseException | None], None]) -> None:
        blocks = self.pool.daemon.allocated if self.pool is not None else 0
        try:
            value, exc = self.put_batch(items), None
        except (BatchWriteError, OutOfSpace) as err:
            value, exc = None, err
        latency = self.batch_write_ns(len(items))
        if self.pool is not None:
            latency += self.alloc_ns * (self.pool.daemon.allocated - blocks)
        self.clock.call_later(latency, done, value, exc)

    def close(self) -> None:
        if self.log is not None:
            self.log.close()
