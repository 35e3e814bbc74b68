"""A slab-allocated key-value cache whose data lives in swappable memory.

Each worker lane owns one shard.  A shard's address space holds a block of
hash-bucket pages (touched on every operation) and one page arena per slab
class; values are stored in fixed-size slots of the smallest class that fits.
Key index and LRU order are ordinary Python objects and never fault.

Operations are generators meant to run inside an LWT.  ``get`` runs inside a
protected scope: when a paging error interrupts it the slab class it was
reading is reset and the caller sees a miss.  An error in the hash-bucket
pages cannot be contained that way and takes the app down.
"""

from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Callable, Generator

from .backend_store import mix64
from .config import Config
from .fault_engine import PAGE_SHIFT, PAGE_SIZE, AddressSpace, FaultEngine, Region
from .lwt import Access, Compute, ErrorResumed, Runtime, Try, WorkerLane

if TYPE_CHECKING:
    from .fault_tolerance import FaultTolerance

CLASS_SIZES = tuple(64 << i for i in range(8))  # 64 B .. 8 KiB
BUCKET_BYTES = 8
SHARD_STRIDE = 1 << 24
CLASS_STRIDE = 1 << 20


class NotFound:
    __slots__ = ()

    def __repr__(self) -> str:
        return "NotFound"

    def __bool__(self) -> bool:
        return False


NOT_FOUND = NotFound()


class Aborted:
    """Returned by an operation whose app was torn down underneath it."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "Aborted"

    def __bool__(self) -> bool:
        return False


ABORTED = Aborted()


def key_hash(key: str | bytes | int) -> int:
    if isinstance(key, int):
        return mix64(key, 0x6B6579)
    if isinstance(key, str):
        key = key.encode()
    return mix64(zlib.crc32(key), len(key))


def class_for(size: int) -> int:
    for i, cap in enumerate(CLASS_SIZES):
        if size <= cap:
            return i
    raise ValueError(f"value of {size} bytes exceeds the largest slab class")


@dataclass(slots=True)
class ItemLoc:
    slot: int
    length: int


class SlabClass:
    """Fixed-size slots over one page arena; ``items`` doubles as the LRU (oldest first)."""

    def __init__(self, class_id: int, region: Region):
        self.class_id = class_id
        self.item_size = CLASS_SIZES[class_id]
        self.region = region
        self.base = region.start_vpn << PAGE_SHIFT
        self.capacity = (region.npages * PAGE_SIZE) // self.item_size
        self.items: OrderedDict[Any, ItemLoc] = OrderedDict()
        self.free: list[int] = []
        self.next_slot = 0
        self.resets = 0
        self.evictions = 0

    def addr(self, slot: int) -> int:
        return self.base + slot * self.item_size

    def pages_of(self, slot: int) -> range:
        first = self.addr(slot) >> PAGE_SHIFT
        last = (self.addr(slot) + self.item_size - 1) >> PAGE_SHIFT
        return range(first, last + 1)

    def used_pages(self) -> range:
        end = self.addr(self.next_slot) + PAGE_SIZE - 1
        return range(self.region.start_vpn, end >> PAGE_SHIFT)

    def alloc(self) -> int:
        if self.free:
            return self.free.pop()
        if self.next_slot < self.capacity:
            self.next_slot += 1
            return self.next_slot - 1
        _, loc = self.items.popitem(last=False)
        self.evictions += 1
        return loc.slot

    def release(self, key: Any) -> None:
        loc = self.items.pop(key)
        self.free.append(loc.slot)

    def reset(self) -> tuple:
        """Drop every item at once; returns the previous state for :meth:`restore`."""
        old = (self.items, self.free, self.next_slot)
        self.items = OrderedDict()
        self.free = []
        self.next_slot = 0
        self.resets += 1
        return old

    def restore(self, state: tuple) -> None:
        self.items, self.free, self.next_slot = state

    def __len__(self) -> int:
        return len(self.items)


class CacheShard:
    def __init__(self, app: "CacheApp", shard_id: int, lane: WorkerLane):
        self.app = app
        self.shard_id = shard_id
        self.lane = lane
        self.base_vpn = (shard_id + 1) * SHARD_STRIDE
        self.meta = app.space.add_region(self.base_vpn, app.meta_pages, lane.lane_id,
                                         tag=f"meta{shard_id}")
        self.classes: dict[int, SlabClass] = {}

    def slab(self, class_id: int) -> SlabClass:
        cls = self.classes.get(class_id)
        if cls is None:
            start = self.base_vpn + (class_id + 1) * CLASS_STRIDE
            npages = max(self.app.arena_pages, -(-CLASS_SIZES[class_id] // PAGE_SIZE))
            region = self.app.space.add_region(start, npages, self.lane.lane_id,
                                               tag=f"slab{self.shard_id}.{class_id}")
            cls = self.classes[class_id] = SlabClass(class_id, region)
        return cls

    def lookup(self, key: Any) -> tuple[SlabClass, ItemLoc] | None:
        for cls in self.classes.values():
            loc = cls.items.get(key)
            if loc is not None:
                return cls, loc
        return None

    def bucket_addr(self, h: int) -> int:
        bucket = (h >> 16) % (self.app.meta_pages * (PAGE_SIZE // BUCKET_BYTES))
        return (self.base_vpn << PAGE_SHIFT) + bucket * BUCKET_BYTES

    def class_at(self, addr: int) -> SlabClass | None:
        offset = (addr >> PAGE_SHIFT) - self.base_vpn
        cls = self.classes.get(offset // CLASS_STRIDE - 1)
        if cls is not None and (addr >> PAGE_SHIFT) in cls.region:
            return cls
        return None

    def reset_class(self, class_id: int) -> tuple | None:
        cls = self.classes.get(class_id)
        return None if cls is None else cls.reset()

    def __len__(self) -> int:
        return sum(len(c) for c in self.classes.values())

    def audit(self) -> list[str]:
        problems = []
        owner: dict[Any, int] = {}
        for cid, cls in self.classes.items():
            slots = set()
            for key, loc in cls.items.items():
                if key in owner:
                    problems.append(f"shard {self.shard_id}: {key!r} in classes {owner[key]} and {cid}")
                owner[key] = cid
                if loc.slot in slots or not 0 <= loc.slot < cls.next_slot:
                    problems.append(f"shard {self.shard_id} class {cid}: bad slot {loc.slot} for {key!r}")
                slots.add(loc.slot)
            if slots & set(cls.free):
                problems.append(f"shard {self.shard_id} class {cid}: live slot on free list")
        return problems


class CacheApp:
    """One cache process: an address space split into per-lane shards."""

    def __init__(self, engine: FaultEngine, runtime: Runtime, lanes: list[WorkerLane],
                 config: Config | None = None, app_id: int = 1,
                 tolerance: "FaultTolerance | None" = None, quota_pages: int | None = None):
        cfg = config or engine.config
        self.engine = engine
        self.runtime = runtime
        self.app_id = app_id
        self.tolerance = tolerance
        self.op_ns: int = cfg["app.op_ns"]
        # request handling outside any protected scope (parse, reply)
        self.request_ns: int = cfg["app.request_ns"]
        self.protect: str = cfg["app.protect"]
        if self.protect not in ("get", "all", "none"):
            raise ValueError(f"app.protect must be get, all or none, not {self.protect!r}")
        self.meta_pages: int = cfg["app.meta_pages"]
        self.arena_pages: int = cfg["app.arena_pages"]
        self.space: AddressSpace = engine.create_space(app_id, True, quota_pages)
        self.shards = [CacheShard(self, i, lane) for i, lane in enumerate(lanes)]
        self.recoveries = 0
        self.escalations = 0
        # on_reset(shard, class, previous_state) runs right after a recovery reset
        self.on_reset: Callable[[CacheShard, SlabClass, tuple], None] | None = None

    @property
    def terminated(self) -> bool:
        return self.space.terminated

    def shard_for(self, key: Any) -> CacheShard:
        return self.shards[key_hash(key) % len(self.shards)]

    def shard_at(self, addr: int) -> CacheShard | None:
        idx = (addr >> PAGE_SHIFT) // SHARD_STRIDE - 1
        return self.shards[idx] if 0 <= idx < len(self.shards) else None

    def region_kind(self, addr: int) -> str:
        shard = self.shard_at(addr)
        if shard is not None and (addr >> PAGE_SHIFT) in shard.meta:
            return "meta"
        return "slab"

    # item memory access ----------------------------------------------------
    def _read_item(self, cls: SlabClass, loc: ItemLoc) -> Generator:
        addr = cls.addr(loc.slot)
        end = addr + loc.length
        parts = []
        while addr < end:
            n = min(end, ((addr >> PAGE_SHIFT) + 1) << PAGE_SHIFT) - addr
            parts.append((yield Access(self.space, addr, n)))
            addr += n
        return parts[0] if len(parts) == 1 else b"".join(parts)

    def _write_item(self, cls: SlabClass, slot: int, value: bytes) -> Generator:
        addr = cls.addr(slot)
        pos = 0
        while pos < len(value):
            n = min(len(value) - pos, (((addr >> PAGE_SHIFT) + 1) << PAGE_SHIFT) - addr)
            yield Access(self.space, addr, n, value[pos:pos + n])
            addr += n
            pos += n

    # operations ------------------------------------------------------------
    def _get_body(self, shard: CacheShard, key: Any, h: int) -> Generator:
        yield Compute(self.op_ns)
        yield Access(self.space, shard.bucket_addr(h), BUCKET_BYTES)
        while True:
            found = shard.lookup(key)
            if found is None:
                return NOT_FOUND
            cls, loc = found
            value = yield from self._read_item(cls, loc)
            # a writer may have moved the item while we were faulting
            if cls.items.get(key) is loc:
                cls.items.move_to_end(key)
                return value

    def _set_body(self, shard: CacheShard, key: Any, h: int, value: bytes) -> Generator:
        yield Compute(self.op_ns)
        yield Access(self.space, shard.bucket_addr(h), BUCKET_BYTES, h.to_bytes(8, "little"))
        cls = shard.slab(class_for(len(value)))
        old = cls.items.get(key)
        slot = old.slot if old is not None else cls.alloc()
        items = cls.items
        yield from self._write_item(cls, slot, value)
        if cls.items is not items:
            # the class was wiped while we wrote; the slot is no longer ours
            return False
        cur = cls.items.get(key)
        if cur is not None and cur.slot != slot:
            cls.release(key)
        for other in shard.classes.values():
            if other is not cls and key in other.items:
                other.release(key)
        cls.items[key] = ItemLoc(slot, len(value))
        cls.items.move_to_end(key)
        return True

    def _protected(self, shard: CacheShard, body, tag: str) -> Generator:
        result = yield Try(body, tag)
        if type(result) is not ErrorResumed:
            return result
        return self._recover(shard, result.error, tag)

    def _recover(self, shard: CacheShard, err: Any, tag: str) -> Any:
        """Catch body: reset the slab class the error hit, or give up on metadata."""
        owner = self.shard_at(err.fault_addr)
        cls = None if owner is None else owner.class_at(err.fault_addr)
        if cls is None:
            self.escalations += 1
            if self.tolerance is not None:
                self.tolerance.escalate(shard.lane.current, err)
            return ABORTED
        previous = cls.reset()
        self.recoveries += 1
        if self.on_reset is not None:
            self.on_reset(owner, cls, previous)
        return NOT_FOUND if tag == "get" else False

    def get(self, key: Any) -> Generator:
        shard = self.shard_for(key)
        h = key_hash(key)
        if self.request_ns:
            yield Compute(self.request_ns)
        if self.protect == "none":
            return (yield from self._get_body(shard, key, h))
        return (yield from self._protected(shard, lambda: self._get_body(shard, key, h), "get"))

    def put(self, key: Any, value: bytes) -> Generator:
        shard = self.shard_for(key)
        h = key_hash(key)
        if self.request_ns:
            yield Compute(self.request_ns)
        if self.protect != "all":
            return (yield from self._set_body(shard, key, h, value))
        return (yield from self._protected(shard, lambda: self._set_body(shard, key, h, value), "put"))

    def update(self, key: Any, value: bytes) -> Generator:
        # absent keys are inserted
        return (yield from self.put(key, value))

    # untimed population --------------------------------------------------
    def prefault(self, class_ids: tuple[int, ...] = ()) -> int:
        """Map every metadata page and every page of the given class arenas."""
        engine, space = self.engine, self.space
        mapped = 0
        for shard in self.shards:
            regions = [shard.meta] + [shard.slab(cid).region for cid in class_ids]
            for region in regions:
                for vpn in range(region.start_vpn, region.start_vpn + region.npages):
                    if not space.table[vpn].present:
                        engine.page_map(space, vpn)
                        mapped += 1
        return mapped

    def load(self, key: Any, value: bytes) -> None:
        """Insert directly into memory, bypassing LWTs and the fault path."""
        shard = self.shard_for(key)
        engine = self.engine
        space = self.space
        h = key_hash(key)
        baddr = shard.bucket_addr(h)
        if not space.table[baddr >> PAGE_SHIFT].present:
            engine.page_map(space, baddr >> PAGE_SHIFT)
        engine.poke(space, baddr, h.to_bytes(8, "little"))
        cls = shard.slab(class_for(len(value)))
        found = shard.lookup(key)
        if found is not None:
            found[0].release(key)
        slot = cls.alloc()
        for vpn in cls.pages_of(slot):
            if not space.table[vpn].present:
                engine.page_map(space, vpn)
        addr = cls.addr(slot)
        pos = 0
        while pos < len(value):
            n = min(len(value) - pos, (((addr >> PAGE_SHIFT) + 1) << PAGE_SHIFT) - addr)
            engine.poke(space, addr, value[pos:pos + n])
            addr += n
            pos += n
        cls.items[key] = ItemLoc(slot, len(value))

    def __len__(self) -> int:
        return sum(len(s) for s in self.shards)

    def audit(self) -> list[str]:
        out = []
        for s in self.shards:
            out.extend(s.audit())
        return out
