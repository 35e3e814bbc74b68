"""Simulated address spaces and the in-process page-fault notification path.

A load/store to a present page is a hit.  A miss runs the kernel-hook model:

1. the faulting LWT's context goes into ``shards[lane % 32]``;
2. the lane's default context is restored, so the carrier is back at PF-entry;
3. after the notification latency for the current number of concurrent
   faulters, :meth:`FaultEngine.pf_entry` moves the context onto the LWT,
   blocks it and hands a :class:`FaultInfo` to the fault handler.

The notification latency is a lookup, not a model: linear interpolation
between measured ``(faulters, ns)`` points.
"""

from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass
from typing import Any, Callable

from .config import Config
from .errors import AlreadyMapped, NoPendingFault, NotMapped, UnmappedRegion
from .lwt import Access, Lwt, LwtState, Runtime, WorkerLane
from .simclock import SimClock

PAGE_SIZE = 4096
PAGE_SHIFT = 12

# (concurrent faulters, average notification latency in ns)
EBPF_PROFILE = ((1, 1600), (16, 1700), (32, 2000), (64, 2400), (128, 4000))
USERFAULTFD_PROFILE = ((1, 6000), (16, 10000), (32, 16000), (64, 39000), (128, 607000))
SIGNAL_PROFILE = ((1, 1700), (16, 18000), (32, 31000), (64, 107000), (128, 657000))
REFERENCE_PROFILES = {
    "ebpf": EBPF_PROFILE,
    "userfaultfd": USERFAULTFD_PROFILE,
    "signal": SIGNAL_PROFILE,
}


class AccessKind(enum.Enum):
    READ = "read"
    WRITE = "write"


class NotifyProfile:
    """Piecewise-linear latency as a function of concurrent faulters."""

    def __init__(self, points: tuple[tuple[int, int], ...]):
        self.points = tuple(sorted(points))
        self._xs = [p[0] for p in self.points]

    @classmethod
    def parse(cls, spec: str) -> "NotifyProfile":
        if spec == "table":
            return cls(EBPF_PROFILE)
        if spec in REFERENCE_PROFILES:
            return cls(REFERENCE_PROFILES[spec])
        if spec.startswith("constant:"):
            return cls(((1, int(spec.split(":", 1)[1])),))
        raise ValueError(f"unknown notify profile {spec!r}")

    def __call__(self, concurrency: int) -> int:
        pts, xs = self.points, self._xs
        if concurrency <= xs[0]:
            return pts[0][1]
        if concurrency >= xs[-1]:
            return pts[-1][1]
        i = bisect.bisect_right(xs, concurrency)
        (x0, y0), (x1, y1) = pts[i - 1], pts[i]
        return round(y0 + (y1 - y0) * (concurrency - x0) / (x1 - x0))


class PageTableEntry:
    __slots__ = ("vpn", "present", "dirty", "accessed", "frame", "backed")

    def __init__(self, vpn: int):
        self.vpn = vpn
        self.present = False
        self.dirty = False
        self.accessed = False
        self.frame: int | None = None
        # the backend holds a copy matching the last clean mapping
        self.backed = False

    def __repr__(self) -> str:
        flags = "".join(c for c, on in (("P", self.present), ("D", self.dirty), ("A", self.accessed)) if on)
        return f"PTE({self.vpn}, {flags or '-'}, frame={self.frame})"


@dataclass(eq=False)
class Region:
    start_vpn: int
    npages: int
    owner_lane: int | None = None
    tag: str = ""

    def __contains__(self, vpn: int) -> bool:
        return self.start_vpn <= vpn < self.start_vpn + self.npages


class AddressSpace:
    def __init__(self, app_id: int, swappable: bool = True, quota_pages: int | None = None):
        self.app_id = app_id
        self.table: dict[int, PageTableEntry] = {}
        self.swappable = swappable
        self.quota_pages = quota_pages
        self.regions: list[Region] = []
        self._region_starts: list[int] = []
        self.resident = 0
        self.terminated = False

    def add_region(self, start_vpn: int, npages: int, owner_lane: int | None = None, tag: str = "") -> Region:
        region = Region(start_vpn, npages, owner_lane, tag)
        i = bisect.bisect_left(self._region_starts, start_vpn)
        self.regions.insert(i, region)
        self._region_starts.insert(i, start_vpn)
        for vpn in range(start_vpn, start_vpn + npages):
            self.table.setdefault(vpn, PageTableEntry(vpn))
        return region

    def region_of(self, vpn: int) -> Region:
        i = bisect.bisect_right(self._region_starts, vpn) - 1
        if i >= 0 and vpn in self.regions[i]:
            return self.regions[i]
        raise UnmappedRegion(f"vpn {vpn:#x} outside app {self.app_id}")

    def pte(self, vpn: int) -> PageTableEntry:
        try:
            return self.table[vpn]
        except KeyError:
            raise UnmappedRegion(f"vpn {vpn:#x} outside app {self.app_id}") from None

    def present_vpns(self) -> list[int]:
        return [vpn for vpn, pte in self.table.items() if pte.present]

    def over_quota(self) -> bool:
        return self.quota_pages is not None and self.resident > self.quota_pages


@dataclass(slots=True)
class FaultContext:
    lwt_id: int
    space: AddressSpace
    vpn: int
    kind: AccessKind
    t_fault: int


@dataclass(slots=True)
class FaultRecord:
    """Timestamps along one fault, for the latency breakdown."""

    app_id: int
    vpn: int
    lane: int
    concurrency: int = 0
    t_fault: int = 0
    t_pf_entry: int = 0
    t_handler: int = 0
    t_lookup_done: int = 0
    t_read_issue: int = 0
    t_read_done: int = 0
    t_map_start: int = 0
    t_resolved: int = 0
    cache_hit: bool = False
    shared: bool = False
    error: bool = False

    def phases(self) -> dict[str, int]:
        """notify / scheduling / cache_lookup / backend_read / mapping (sum = total)."""
        notify = self.t_pf_entry - self.t_fault
        if self.shared:
            return {"notify": notify, "cache_lookup": 0, "backend_read": 0,
                    "scheduling": self.t_resolved - self.t_pf_entry, "mapping": 0}
        lookup = self.t_lookup_done - self.t_handler
        if self.cache_hit:
            read = 0
            sched = (self.t_handler - self.t_pf_entry) + (self.t_map_start - self.t_lookup_done)
        else:
            read = self.t_read_done - self.t_read_issue
            sched = ((self.t_handler - self.t_pf_entry) + (self.t_read_issue - self.t_lookup_done)
                     + (self.t_map_start - self.t_read_done))
        return {"notify": notify, "cache_lookup": lookup, "backend_read": read,
                "scheduling": sched, "mapping": self.t_resolved - self.t_map_start}

    @property
    def total(self) -> int:
        return self.t_resolved - self.t_fault


@dataclass(slots=True)
class FaultInfo:
    lwt: Lwt
    space: AddressSpace
    vpn: int
    kind: AccessKind
    record: FaultRecord

    @property
    def key(self) -> tuple[int, int]:
        return (self.space.app_id, self.vpn)


PF_START = "pf-start"


class FaultContextMapSet:
    """``nshards`` keyed stores, shard = lane_id mod nshards."""

    def __init__(self, nshards: int = 32):
        self.nshards = nshards
        self.shards: list[dict[int, FaultContext]] = [{} for _ in range(nshards)]
        self.inserts = 0
        self.removes = 0

    def shard_for(self, lane_id: int) -> int:
        return lane_id % self.nshards

    def insert(self, lane_id: int, ctx: FaultContext) -> int:
        shard = self.shards[lane_id % self.nshards]
        if lane_id in shard:
            raise RuntimeError(f"lane {lane_id} already has a pending fault")
        shard[lane_id] = ctx
        self.inserts += 1
        return len(shard)

    def pop(self, lane_id: int) -> FaultContext | None:
        ctx = self.shards[lane_id % self.nshards].pop(lane_id, None)
        if ctx is not None:
            self.removes += 1
        return ctx

    def __len__(self) -> int:
        return sum(len(s) for s in self.shards)


def shard_for(lane_id: int, nshards: int = 32) -> int:
    return lane_id % nshards


def max_shard_occupancy(lanes: int, nshards: int = 32) -> int:
    """Largest number of lanes sharing one shard, by construction."""
    return math.ceil(lanes / nshards)


class FaultEngine:
    """Memory access + fault notification, wired into a :class:`Runtime`."""

    def __init__(self, clock: SimClock, runtime: Runtime, config: Config | None = None):
        self.clock = clock
        self.runtime = runtime
        self.config = config or Config()
        self.access_ns: int = self.config["mem.access_ns"]
        self.pf_entry_ns: int = self.config["fault.pf_entry_ns"]
        self.shard_lock_ns: int = self.config["fault.shard_lock_ns"]
        self.notify_ns = NotifyProfile.parse(self.config["fault.notify_profile"])
        self.contexts = FaultContextMapSet(self.config["fault.shards"])
        self.default_contexts: dict[int, tuple] = {}
        self.spaces: dict[int, AddressSpace] = {}
        self.frames: dict[int, bytearray | None] = {}
        self.isolated_frames: set[int] = set()
        self._next_frame = 0
        self.resident = 0
        self.limit_pages: int | None = None
        # fault handler: called with FaultInfo after PF-entry
        self.handler: Callable[[FaultInfo], None] | None = None
        # called after every page_map (memory-pressure hook)
        self.on_map: Callable[[AddressSpace], None] | None = None
        # armed by fault injection: called on every access before it runs
        self.access_hook: Callable[[Lwt, AddressSpace, int], None] | None = None
        self.notifying = 0
        self.inflight_faults = 0
        self.records: list[FaultRecord] = []
        self.keep_records = True
        self.hits = 0
        self.faults = 0
        runtime.memory = self
        for lane in runtime.lanes:
            self.pf_entry_start(lane)

    # spaces and frames -------------------------------------------------
    def create_space(self, app_id: int, swappable: bool = True, quota_pages: int | None = None) -> AddressSpace:
        space = AddressSpace(app_id, swappable, quota_pages)
        self.spaces[app_id] = space
        return space

    def alloc_frame(self, data: bytes | bytearray | None = None) -> int:
        frame = self._next_frame
        self._next_frame += 1
        self.frames[frame] = bytearray(data) if data is not None else None
        return frame

    def frame_bytes(self, frame: int) -> bytes:
        buf = self.frames[frame]
        return bytes(PAGE_SIZE) if buf is None else bytes(buf)

    def shard_for(self, lane_id: int) -> int:
        return self.contexts.shard_for(lane_id)

    # mapping -----------------------------------------------------------
    def page_map(self, space: AddressSpace, vpn: int, frame: int | None = None,
                 data: bytes | bytearray | None = None, *, dirty: bool = False,
                 backed: bool | None = None) -> PageTableEntry:
        pte = space.pte(vpn)
        if pte.present:
            raise AlreadyMapped(f"vpn {vpn:#x} already mapped")
        if frame is None:
            frame = self.alloc_frame(data)
        elif data is not None:
            self.frames[frame] = bytearray(data)
        pte.present = True
        pte.frame = frame
        pte.dirty = dirty
        pte.accessed = False
        if backed is not None:
            pte.backed = backed
        space.resident += 1
        self.resident += 1
        if self.on_map is not None:
            self.on_map(space)
        return pte

    def page_unmap(self, space: AddressSpace, vpn: int) -> tuple[int, bytes, bool]:
        pte = space.pte(vpn)
        if not pte.present:
            raise NotMapped(f"vpn {vpn:#x} not mapped")
        frame = pte.frame
        data = self.frame_bytes(frame)
        dirty = pte.dirty
        pte.present = False
        pte.frame = None
        pte.dirty = False
        pte.accessed = False
        space.resident -= 1
        self.resident -= 1
        del self.frames[frame]
        return frame, data, dirty

    # direct (untimed) memory helpers, used for setup and checks --------
    def peek(self, space: AddressSpace, addr: int, size: int) -> bytes:
        pte = space.pte(addr >> PAGE_SHIFT)
        if not pte.present:
            raise NotMapped(f"addr {addr:#x} not present")
        off = addr & (PAGE_SIZE - 1)
        buf = self.frames[pte.frame]
        return bytes(size) if buf is None else bytes(buf[off:off + size])

    def poke(self, space: AddressSpace, addr: int, data: bytes) -> None:
        pte = space.pte(addr >> PAGE_SHIFT)
        if not pte.present:
            raise NotMapped(f"addr {addr:#x} not present")
        self._store(pte, addr & (PAGE_SIZE - 1), data)
        pte.dirty = True

    def _store(self, pte: PageTableEntry, off: int, data: bytes) -> None:
        buf = self.frames[pte.frame]
        if buf is None:
            buf = self.frames[pte.frame] = bytearray(PAGE_SIZE)
        buf[off:off + len(data)] = data

    # the access path ---------------------------------------------------
    def access(self, lwt: Lwt, req: Access) -> tuple[bool, Any]:
        """Runtime hook: (True, value) on a hit, (False, None) once the fault path started."""
        space = req.space
        vpn = req.addr >> PAGE_SHIFT
        pte = space.table.get(vpn)
        if pte is None:
            raise UnmappedRegion(f"addr {req.addr:#x} outside app {space.app_id}")
        if self.access_hook is not None:
            self.access_hook(lwt, space, vpn)
        if pte.present:
            self.hits += 1
            pte.accessed = True
            off = req.addr & (PAGE_SIZE - 1)
            if req.data is not None:
                self._store(pte, off, req.data)
                pte.dirty = True
                return True, None
            buf = self.frames[pte.frame]
            if buf is None:
                return True, bytes(req.size)
            return True, bytes(buf[off:off + req.size])
        kind = AccessKind.READ if req.data is None else AccessKind.WRITE
        self.fault(lwt, space, vpn, kind)
        return False, None

    def fault(self, lwt: Lwt, space: AddressSpace, vpn: int, kind: AccessKind) -> FaultRecord:
        lane = lwt.lane
        now = self.clock.now()
        self.faults += 1
        self.inflight_faults += 1
        occupancy = self.contexts.insert(lane.lane_id, FaultContext(lwt.id, space, vpn, kind, now))
        lane.in_fault = True
        record = FaultRecord(space.app_id, vpn, lane.lane_id, t_fault=now)
        if self.keep_records:
            self.records.append(record)
        self.notifying += 1
        # Notification starts after every fault raised at this instant is registered.
        self.clock.call_later(0, self._notify, lane, record, occupancy)
        return record

    def _notify(self, lane: WorkerLane, record: FaultRecord, occupancy: int) -> None:
        record.concurrency = self.notifying
        delay = self.notify_ns(self.notifying) + self.shard_lock_ns * (occupancy - 1)
        self.clock.call_later(delay, self._pf_entry_event, lane, record)

    def _pf_entry_event(self, lane: WorkerLane, record: FaultRecord) -> None:
        self.notifying -= 1
        record.t_pf_entry = self.clock.now()
        info = self.pf_entry(lane, record)
        if info is None:
            return
        if self.handler is None:
            raise RuntimeError("no fault handler installed")
        self.handler(info)

    def pf_entry_start(self, lane: WorkerLane) -> str:
        """First PF-entry on a lane: save its default context."""
        if lane.lane_id in self.default_contexts:
            raise RuntimeError(f"lane {lane.lane_id} default context already saved")
        token = ("pf-entry", lane.lane_id)
        self.default_contexts[lane.lane_id] = token
        lane.default_context = token
        return PF_START

    def pf_entry(self, lane: WorkerLane, record: FaultRecord | None = None) -> FaultInfo | str | None:
        if lane.lane_id not in self.default_contexts:
            return self.pf_entry_start(lane)
        ctx = self.contexts.pop(lane.lane_id)
        if ctx is None:
            raise NoPendingFault(f"lane {lane.lane_id} has no pending fault")
        lane.in_fault = False
        lwt = self.runtime.lwts.get(ctx.lwt_id)
        if lwt is None or lwt.state is LwtState.TERMINATED:
            self.inflight_faults -= 1
            self.runtime._kick(lane)
            return None
        self.runtime.block_current(lwt, "page-fault")
        if record is None:
            record = FaultRecord(ctx.space.app_id, ctx.vpn, lane.lane_id, t_fault=ctx.t_fault,
                                 t_pf_entry=self.clock.now())
        return FaultInfo(lwt, ctx.space, ctx.vpn, ctx.kind, record)

    def fault_resolved(self, record: FaultRecord) -> None:
        self.inflight_faults -= 1

    def audit_contexts(self) -> None:
        """At quiescence every inserted context has been consumed."""
        if self.contexts.inserts != self.contexts.removes or len(self.contexts):
            raise AssertionError(
                f"context leak: {self.contexts.inserts} inserted, {self.contexts.removes} removed")
