"""Swap policy, swap-out pipeline and the swap-in fault handler.

A page is always in exactly one place: mapped in its page table, staged in
the :class:`SwapCache`, in flight (being brought back), or in the backend
store.  Pages that were never populated live nowhere and fault in as zeros.

Evicted dirty (or never-written-back) pages go to the swap cache and reach
the backend in batches.  A fault first looks in the swap cache, and only on
a miss reads the backend from a dedicated swap-in LWT on the faulting lane,
so the lane keeps serving other LWTs while the read is outstanding.
"""

from __future__ import annotations

import enum
from collections import OrderedDict, deque
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Callable, Iterable

from .backend_store import BackendStore, mix64
from .config import Config
from .errors import (
    BatchWriteError,
    ChecksumMismatch,
    InjectedDeviceError,
    KeyNotFound,
    NoEvictable,
    OutOfSpace,
    SwapInError,
    UnmappedRegion,
)
from .fault_engine import PAGE_SHIFT, AccessKind, AddressSpace, FaultEngine, FaultInfo
from .lwt import Compute, Io, LwtClass, LwtState, Park, WorkerLane

if TYPE_CHECKING:
    from .coldscan import ColdScanner
    from .fault_tolerance import FaultTolerance

Key = tuple[int, int]
READ_ERRORS = (InjectedDeviceError, ChecksumMismatch, KeyNotFound)


class Direction(enum.Enum):
    OUT = "out"
    IN = "in"


class Origin(enum.Enum):
    ADVISED = "advised"
    READ_AHEAD = "read_ahead"


@dataclass(frozen=True, slots=True)
class AdviseRange:
    app_id: int
    start_vpn: int
    len_pages: int
    direction: Direction

    def __contains__(self, vpn: int) -> bool:
        return self.start_vpn <= vpn < self.start_vpn + self.len_pages

    def vpns(self) -> range:
        return range(self.start_vpn, self.start_vpn + self.len_pages)


@dataclass(slots=True)
class PrefetchRequest:
    app_id: int
    vpns: list[int]
    origin: Origin


@dataclass(slots=True)
class CacheEntry:
    data: bytes
    dirty: bool
    version: int


class SwapCache:
    """Evicted pages waiting for writeback, keyed by ``(app_id, vpn)``."""

    def __init__(self, flush_threshold: int = 64):
        self.flush_threshold = flush_threshold
        self.entries: OrderedDict[Key, CacheEntry] = OrderedDict()
        self._version = 0

    def insert(self, key: Key, data: bytes, dirty: bool = True) -> int:
        self._version += 1
        self.entries[key] = CacheEntry(data, dirty, self._version)
        self.entries.move_to_end(key)
        return self._version

    def pop(self, key: Key) -> CacheEntry | None:
        return self.entries.pop(key, None)

    def get(self, key: Key) -> CacheEntry | None:
        return self.entries.get(key)

    def remove_if_version(self, key: Key, version: int) -> bool:
        entry = self.entries.get(key)
        if entry is not None and entry.version == version:
            del self.entries[key]
            return True
        return False

    def snapshot(self) -> list[tuple[Key, CacheEntry]]:
        return list(self.entries.items())

    def __contains__(self, key: Key) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def over_threshold(self) -> bool:
        return len(self.entries) >= self.flush_threshold


class Inflight:
    """A page being brought back; later faulters on it wait here."""

    __slots__ = ("key", "info", "cached", "waiters", "prefetch")

    def __init__(self, key: Key, info: FaultInfo | None, cached: CacheEntry | None = None,
                 prefetch: bool = False):
        self.key = key
        self.info = info
        self.cached = cached
        self.waiters: list[FaultInfo] = []
        self.prefetch = prefetch


@dataclass
class SwapStats:
    swap_outs: int = 0
    clean_discards: int = 0
    cached_evictions: int = 0
    skipped_victims: int = 0
    flushes: int = 0
    flushed_pages: int = 0
    flush_failures: int = 0
    swap_ins: int = 0
    cache_hits: int = 0
    zero_fills: int = 0
    shared_faults: int = 0
    swapin_errors: int = 0
    prefetch_requests: int = 0
    prefetch_dropped: int = 0
    prefetch_reads: int = 0
    prefetch_mapped: int = 0
    prefetch_errors: int = 0
    swapout_requests: int = 0
    rescans: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(self.__dict__)


class SwapCore:
    def __init__(self, engine: FaultEngine, backend: BackendStore, config: Config | None = None,
                 scanner: "ColdScanner | None" = None, mode: str | None = None):
        self.engine = engine
        self.runtime = engine.runtime
        self.clock = engine.clock
        self.backend = backend
        self.config = cfg = config or engine.config
        self.mode = mode or cfg["swap.mode"]
        if self.mode not in ("lwt", "blocking"):
            raise ValueError(f"unknown swap mode {self.mode!r}")
        self.cache = SwapCache(cfg["swap.flush_threshold_pages"])
        self.flush_interval_ns: int = cfg["swap.flush_interval_us"] * 1000
        self.readahead: int = cfg["swap.readahead_pages"]
        self.prefetch_enabled: bool = cfg["swap.prefetch"]
        self.prefetch_on_hit: bool = cfg["swap.prefetch_on_cache_hit"]
        self.prefetch_cap: int = cfg["swap.prefetch_queue_cap"]
        self.pf_entry_ns: int = cfg["fault.pf_entry_ns"]
        self.lookup_ns: int = cfg["swap.lookup_ns"]
        self.map_ns: int = cfg["swap.map_ns"]
        self.unmap_ns: int = cfg["swap.unmap_ns"]
        self.threshold_pages: int = cfg["scan.low_mem_threshold_pages"]
        self.scanner = scanner
        if scanner is not None:
            scanner.swap = self
        # set by the fault-tolerance layer
        self.tolerance: "FaultTolerance | None" = None

        self.advise_out: dict[int, list[AdviseRange]] = {}
        self.advise_in: dict[int, list[AdviseRange]] = {}
        self.cold: dict[int, deque[int]] = {}
        self.hot: dict[int, set[int]] = {}
        self._rr_cursor = 0
        self._seen_epoch: dict[int, int] = {}
        self._last_rescan: int | None = None
        self.inflight: dict[Key, Inflight] = {}
        self.prefetch_q: deque[PrefetchRequest] = deque()
        self._idle_prefetchers: deque[int] = deque()
        self._stalls: dict[int, int] = {}
        self.stats = SwapStats()
        # optional observer of demand swap-in reads: read_hook(info) -> None
        self.read_hook: Callable[[FaultInfo], None] | None = None

        self._flush_lid: int | None = None
        self._flush_idle = False
        self._flush_timer = False
        self._flush_wanted = False
        self._swapout_lid: int | None = None
        self._swapout_idle = False
        self.service_lane: WorkerLane | None = None
        self.prefetch_lane: WorkerLane | None = None

        engine.handler = self.on_fault
        engine.on_map = self._on_map

    # service LWTs ------------------------------------------------------
    def start(self) -> None:
        """Create the swap-out/flush lane and the prefetcher lane."""
        if self.service_lane is not None:
            return
        rt = self.runtime
        self.service_lane = rt.add_lane("swap", lwt_cap=2)
        self._flush_lid = rt.spawn(self.service_lane, self._flusher(), name="flusher")
        self._swapout_lid = rt.spawn(self.service_lane, self._swapper(), name="swap-out")
        if self.prefetch_enabled and self.config["swap.prefetchers"] > 0:
            n = self.config["swap.prefetchers"]
            self.prefetch_lane = rt.add_lane("prefetch", lwt_cap=n)
            for i in range(n):
                rt.spawn(self.prefetch_lane, self._prefetcher(), name=f"prefetch{i}")

    # advice ------------------------------------------------------------
    def swap_advise(self, space: AddressSpace, addr: int, length: int, out: bool) -> AdviseRange:
        if length <= 0:
            raise UnmappedRegion("empty advice range")
        start = addr >> PAGE_SHIFT
        end = (addr + length - 1) >> PAGE_SHIFT
        for vpn in (start, end):
            space.region_of(vpn)
        rng = AdviseRange(space.app_id, start, end - start + 1, Direction.OUT if out else Direction.IN)
        book = self.advise_out if out else self.advise_in
        book.setdefault(space.app_id, []).append(rng)
        return rng

    def notify_cold(self, space: AddressSpace, cold: Iterable[int], hot: Iterable[int]) -> None:
        app = space.app_id
        self.cold[app] = deque(sorted(cold, key=lambda v: mix64(app, v)))
        self.hot[app] = set(hot)

    # victim selection --------------------------------------------------
    def _evictable(self, space: AddressSpace, vpn: int, hot: set[int], taken: set[Key]) -> bool:
        pte = space.table.get(vpn)
        return (pte is not None and pte.present and vpn not in hot
                and (space.app_id, vpn) not in taken)

    def select_victims(self, n: int) -> list[Key]:
        if n < 1:
            raise ValueError("n must be >= 1")
        spaces = sorted((s for s in self.engine.spaces.values() if s.swappable and not s.terminated),
                        key=lambda s: s.app_id)
        victims: list[Key] = []
        taken: set[Key] = set()

        # (a) advised ranges of apps over their quota
        for space in spaces:
            if not space.over_quota():
                continue
            hot = self.hot.get(space.app_id, set())
            for rng in self.advise_out.get(space.app_id, ()):
                for vpn in rng.vpns():
                    if len(victims) == n:
                        return victims
                    if self._evictable(space, vpn, hot, taken):
                        key = (space.app_id, vpn)
                        victims.append(key)
                        taken.add(key)

        # (b) one page per app in turn: advised pages, then cold pages
        if not spaces:
            if victims:
                return victims
            raise NoEvictable("no swappable application")
        sources = {s.app_id: self._candidates(s, taken) for s in spaces}
        live = [s.app_id for s in spaces]
        cursor = self._rr_cursor % len(live)
        exhausted: set[int] = set()
        while len(victims) < n and len(exhausted) < len(live):
            app = live[cursor]
            cursor = (cursor + 1) % len(live)
            if app in exhausted:
                continue
            key = next(sources[app], None)
            if key is None:
                exhausted.add(app)
                continue
            victims.append(key)
            taken.add(key)
            self._rr_cursor = cursor
        if not victims:
            raise NoEvictable("no cold or advised page to evict")
        return victims

    def _candidates(self, space: AddressSpace, taken: set[Key]):
        app = space.app_id
        hot = self.hot.get(app, set())
        for rng in self.advise_out.get(app, ()):
            for vpn in rng.vpns():
                if self._evictable(space, vpn, hot, taken):
                    yield (app, vpn)
        cold = self.cold.get(app)
        while cold:
            vpn = cold.popleft()
            if self._evictable(space, vpn, hot, taken):
                yield (app, vpn)

    # swap-out ----------------------------------------------------------
    def swap_out(self, victims: Iterable[Key]) -> int:
        """Unmap victims; dirty or not-yet-written-back pages go to the swap cache."""
        engine = self.engine
        stats = self.stats
        moved = 0
        for key in victims:
            app, vpn = key
            space = engine.spaces.get(app)
            pte = None if space is None else space.table.get(vpn)
            if pte is None or not pte.present or key in self.inflight:
                stats.skipped_victims += 1
                continue
            untouched = engine.frames[pte.frame] is None and not pte.dirty
            _, data, dirty = engine.page_unmap(space, vpn)
            stats.swap_outs += 1
            moved += 1
            if untouched and not pte.backed and key not in self.backend:
                # never written: it will fault back in as zeros
                stats.clean_discards += 1
            elif dirty or not pte.backed:
                pte.backed = False
                self.cache.insert(key, data, True)
                stats.cached_evictions += 1
            else:
                stats.clean_discards += 1
        if self.cache.over_threshold:
            self._request_flush()
        elif self.cache and not self._flush_timer:
            self._arm_flush_timer()
        return moved

    def flush_swap_cache(self) -> int:
        """Synchronously write every cached page back in one batch."""
        batch = self.cache.snapshot()
        if not batch:
            return 0
        try:
            self.backend.put_batch([(key, e.data) for key, e in batch])
            failed: set[Key] = set()
        except BatchWriteError as err:
            failed = set(err.failures)
        except OutOfSpace:
            failed = {key for key, _ in batch}
        return self._complete_flush(batch, failed)

    def _complete_flush(self, batch: list[tuple[Key, CacheEntry]], failed: set[Key]) -> int:
        done = 0
        for key, entry in batch:
            if key in failed:
                continue
            self.cache.remove_if_version(key, entry.version)
            done += 1
        self.stats.flushes += 1
        self.stats.flushed_pages += done
        self.stats.flush_failures += len(failed)
        return done

    def _request_flush(self) -> None:
        if self._flush_lid is None:
            self.flush_swap_cache()
            return
        self._flush_wanted = True
        if self._flush_idle:
            self._flush_idle = False
            self.runtime.wake(self._flush_lid)

    def _arm_flush_timer(self) -> None:
        if self._flush_lid is None:
            return
        self._flush_timer = True
        self.clock.call_later(self.flush_interval_ns, self._flush_tick)

    def _flush_tick(self) -> None:
        self._flush_timer = False
        if self.cache:
            self._request_flush()

    def _flusher(self):
        while True:
            if not self.cache or not (self._flush_wanted or self.cache.over_threshold):
                if self.cache and not self._flush_timer:
                    self._arm_flush_timer()
                self._flush_idle = True
                yield Park("flush-idle")
                continue
            self._flush_wanted = False
            batch = self.cache.snapshot()
            items = [(key, e.data) for key, e in batch]
            try:
                yield Io(lambda done: self.backend.put_batch_async(items, done))
                failed: set[Key] = set()
            except BatchWriteError as err:
                failed = set(err.failures)
            except OutOfSpace:
                failed = {key for key, _ in batch}
            self._complete_flush(batch, failed)

    # memory pressure ---------------------------------------------------
    def available_pages(self) -> int | None:
        limit = self.engine.limit_pages
        return None if limit is None else limit - self.engine.resident

    def _on_map(self, space: AddressSpace) -> None:
        avail = self.available_pages()
        if (avail is not None and avail < self.threshold_pages) or space.over_quota():
            self.request_swap_out()

    def pressure_target(self) -> int:
        avail = self.available_pages()
        if avail is None:
            want = 0
        else:
            want = 2 * self.threshold_pages - avail
        over = sum(s.resident - s.quota_pages for s in self.engine.spaces.values()
                   if s.over_quota())
        return max(want, over)

    def request_swap_out(self) -> None:
        self.stats.swapout_requests += 1
        if self._swapout_lid is None:
            self.evict(self.pressure_target())
            return
        if self._swapout_idle:
            self._swapout_idle = False
            self.runtime.wake(self._swapout_lid)

    def evict(self, n: int) -> int:
        """Select and swap out up to ``n`` pages right now (no virtual time)."""
        if n <= 0:
            return 0
        victims = self._select_with_rescan(n)
        return self.swap_out(victims)

    def _refresh_cold(self) -> bool:
        """Pull classifications the scanner produced since we last looked."""
        scanner = self.scanner
        changed = False
        for space in scanner.targets():
            st = scanner.state(space)
            if st.epoch >= 2 and self._seen_epoch.get(space.app_id) == st.epoch:
                continue
            scanner.ensure_scanned(space)
            classes = scanner.classify(space)
            self.notify_cold(space, classes["cold"], classes["hot"])
            self._seen_epoch[space.app_id] = st.epoch
            changed = True
        return changed

    def _select_with_rescan(self, n: int) -> list[Key]:
        try:
            return self.select_victims(n)
        except NoEvictable:
            if self.scanner is None:
                return []
        if self._refresh_cold():
            try:
                return self.select_victims(n)
            except NoEvictable:
                pass
        now = self.clock.now()
        if self._last_rescan is not None and now - self._last_rescan < self.scanner.interval_ns:
            return []
        self._last_rescan = now
        self.stats.rescans += 1
        for app, classes in self.scanner.rescan(self.scanner.targets()).items():
            self._seen_epoch[app] = self.scanner.states[app].epoch
        try:
            return self.select_victims(n)
        except NoEvictable:
            return []

    def _swapper(self):
        while True:
            n = self.pressure_target()
            if n <= 0:
                self._swapout_idle = True
                yield Park("swap-out-idle")
                continue
            victims = self._select_with_rescan(n)
            if not victims:
                self._swapout_idle = True
                yield Park("swap-out-starved")
                continue
            yield Compute(self.unmap_ns * len(victims))
            self.swap_out(victims)

    # swap-in -----------------------------------------------------------
    def on_fault(self, info: FaultInfo) -> None:
        """Fault handler run at PF-entry; never blocks the lane."""
        key = info.key
        lane = info.lwt.lane
        if self.mode == "blocking":
            self._stall(lane)
        entry = self.inflight.get(key)
        if entry is not None:
            info.record.shared = True
            self.stats.shared_faults += 1
            entry.waiters.append(info)
            self.runtime._kick(lane)
            return
        pte = info.space.table[info.vpn]
        if pte.present:
            # brought in (e.g. by a prefetcher) between the fault and PF-entry
            info.record.shared = True
            self.stats.shared_faults += 1
            self._resolve(info)
            self.runtime._kick(lane)
            return
        self._start_swap_in(info)

    def _start_swap_in(self, info: FaultInfo) -> None:
        key = info.key
        entry = Inflight(key, info, self.cache.pop(key))
        self.inflight[key] = entry
        self.runtime.spawn(info.lwt.lane, self._swap_in(entry), LwtClass.SWAP_IN,
                           name=f"swapin-{key[0]}:{key[1]:#x}", app=info.lwt.app)

    def _swap_in(self, entry: Inflight):
        info = entry.info
        rec = info.record
        clock = self.clock
        space, vpn, key = info.space, info.vpn, entry.key
        yield Compute(self.pf_entry_ns)
        rec.t_handler = clock.now()
        yield Compute(self.lookup_ns)
        rec.t_lookup_done = clock.now()
        backed = False
        if entry.cached is not None:
            data, dirty = entry.cached.data, True
            rec.cache_hit = True
            self.stats.cache_hits += 1
        elif key in self.backend:
            rec.t_read_issue = clock.now()
            if self.read_hook is not None:
                self.read_hook(info)

            def submit(done):
                def landed(value, exc):
                    rec.t_read_done = clock.now()
                    done(value, exc)
                self.backend.get_async(key, landed)

            try:
                data = yield Io(submit)
            except READ_ERRORS as exc:
                self._swap_in_failed(entry, exc)
                return
            dirty = info.kind is AccessKind.WRITE
            backed = not dirty
            self.stats.swap_ins += 1
        else:
            rec.t_read_issue = rec.t_read_done = clock.now()
            data, dirty = None, info.kind is AccessKind.WRITE
            self.stats.zero_fills += 1
        rec.t_map_start = clock.now()
        yield Compute(self.map_ns)
        if space.terminated:
            self._drop_inflight(entry)
            return
        self.engine.page_map(space, vpn, data=data, dirty=dirty, backed=backed)
        del self.inflight[key]
        self._resolve(info)
        for waiter in entry.waiters:
            self._resolve(waiter)
        if self.prefetch_enabled and (not rec.cache_hit or self.prefetch_on_hit):
            self._enqueue_prefetch(space, vpn)

    def _resolve(self, info: FaultInfo) -> None:
        rec = info.record
        now = self.clock.now()
        if rec.shared:
            rec.t_handler = rec.t_lookup_done = rec.t_read_issue = rec.t_read_done = now
            rec.t_map_start = now
        rec.t_resolved = now
        self.engine.fault_resolved(rec)
        lane = info.lwt.lane
        if self.mode == "blocking":
            self._unstall(lane)
        if info.lwt.state is LwtState.BLOCKED:
            self.runtime.wake(info.lwt.id, LwtClass.FAULTING_RESUMED)
        elif self.mode == "blocking":
            self.runtime._kick(lane)

    def _drop_inflight(self, entry: Inflight) -> None:
        self.inflight.pop(entry.key, None)
        for info in ([entry.info] if entry.info is not None else []) + entry.waiters:
            info.record.error = True
            self.engine.fault_resolved(info.record)
            if self.mode == "blocking":
                self._unstall(info.lwt.lane)

    def _swap_in_failed(self, entry: Inflight, exc: BaseException) -> None:
        """Route the error to the faulter; anyone else waiting retries the read."""
        self.stats.swapin_errors += 1
        del self.inflight[entry.key]
        info = entry.info
        info.record.error = True
        info.record.t_map_start = info.record.t_resolved = self.clock.now()
        self.engine.fault_resolved(info.record)
        if self.mode == "blocking":
            self._unstall(info.lwt.lane)
        err = SwapInError(entry.key, exc)
        if self.tolerance is not None:
            self.tolerance.raise_swapin_error(info, err)
        else:
            self.runtime.kill(info.lwt, err)
        self._retry_waiters(entry.waiters)

    def _retry_waiters(self, waiters: list[FaultInfo]) -> None:
        waiters = [w for w in waiters if w.lwt.state is LwtState.BLOCKED]
        if not waiters:
            return
        first, rest = waiters[0], waiters[1:]
        first.record.shared = False
        self._start_swap_in(first)
        self.inflight[first.key].waiters.extend(rest)

    def _stall(self, lane: WorkerLane) -> None:
        self._stalls[lane.lane_id] = self._stalls.get(lane.lane_id, 0) + 1
        lane.stalled = True

    def _unstall(self, lane: WorkerLane) -> None:
        left = self._stalls.get(lane.lane_id, 0) - 1
        self._stalls[lane.lane_id] = max(left, 0)
        if left <= 0:
            lane.stalled = False

    # prefetch ----------------------------------------------------------
    def _absent(self, space: AddressSpace, vpn: int) -> bool:
        pte = space.table.get(vpn)
        key = (space.app_id, vpn)
        return (pte is not None and not pte.present and key not in self.cache
                and key not in self.inflight)

    def prefetch_window(self, vpn: int) -> list[int]:
        before = self.readahead // 2
        return [v for v in range(vpn - before, vpn + self.readahead - before + 1) if v != vpn]

    def _enqueue_prefetch(self, space: AddressSpace, vpn: int) -> PrefetchRequest | None:
        app = space.app_id
        ranges = self.advise_in.get(app)
        rng = None
        if ranges:
            for i, r in enumerate(ranges):
                if vpn in r:
                    rng = ranges.pop(i)
                    break
        if rng is not None:
            vpns, origin = list(rng.vpns()), Origin.ADVISED
        else:
            vpns, origin = self.prefetch_window(vpn), Origin.READ_AHEAD
        vpns = [v for v in vpns if self._absent(space, v)]
        if not vpns:
            return None
        if len(self.prefetch_q) >= self.prefetch_cap:
            self.stats.prefetch_dropped += 1
            return None
        req = PrefetchRequest(app, vpns, origin)
        self.prefetch_q.append(req)
        self.stats.prefetch_requests += 1
        if self._idle_prefetchers:
            self.runtime.wake(self._idle_prefetchers.popleft())
        return req

    def _read_many(self, keys: list[Key], done: Callable[[Any, BaseException | None], None]) -> None:
        """Issue every read at once; all complete after one read latency."""
        results: list[tuple[Key, bytes | None, BaseException | None]] = []
        for key in keys:
            try:
                results.append((key, self.backend.get(key), None))
            except READ_ERRORS as exc:
                results.append((key, None, exc))
        self.clock.call_later(self.backend.read_ns, done, results, None)

    def _prefetcher(self):
        while True:
            if not self.prefetch_q:
                self._idle_prefetchers.append(self.prefetch_lane.current.id)
                yield Park("prefetch-idle")
                continue
            req = self.prefetch_q.popleft()
            space = self.engine.spaces.get(req.app_id)
            if space is None or space.terminated:
                continue
            keys = []
            for vpn in req.vpns:
                key = (req.app_id, vpn)
                if self._absent(space, vpn) and key in self.backend:
                    self.inflight[key] = Inflight(key, None, prefetch=True)
                    keys.append(key)
            if not keys:
                continue
            self.stats.prefetch_reads += len(keys)
            results = yield Io(lambda done: self._read_many(keys, done))
            for key, data, exc in results:
                entry = self.inflight[key]
                if exc is not None or space.terminated:
                    # page stays in the backend; a demand fault will retry it
                    self.stats.prefetch_errors += exc is not None
                    del self.inflight[key]
                    self._retry_waiters(entry.waiters)
                    continue
                yield Compute(self.map_ns)
                del self.inflight[key]
                self.engine.page_map(space, key[1], data=data, dirty=False, backed=True)
                self.stats.prefetch_mapped += 1
                for waiter in entry.waiters:
                    self._resolve(waiter)

    # audit -------------------------------------------------------------
    def audit(self) -> list[str]:
        """Places where a page is held by more than one of table/cache/in-flight."""
        problems: list[str] = []
        spaces = self.engine.spaces
        for key in self.cache.entries:
            space = spaces.get(key[0])
            if space is not None and space.table[key[1]].present:
                problems.append(f"{key} present and in swap cache")
            if key in self.inflight:
                problems.append(f"{key} in swap cache and in flight")
        for key in self.inflight:
            space = spaces.get(key[0])
            if space is not None and space.table[key[1]].present:
                problems.append(f"{key} present and in flight")
        return problems

    def location_of(self, key: Key) -> str:
        space = self.engine.spaces[key[0]]
        if space.table[key[1]].present:
            return "present"
        if key in self.cache:
            return "cache"
        if key in self.inflight:
            return "inflight"
        if key in self.backend:
            return "backend"
        return "unpopulated"

    def start_audit(self, interval_ns: int = 1_000_000, sink: list | None = None) -> list:
        """Run :meth:`audit` every ``interval_ns`` while other events are pending."""
        out = [] if sink is None else sink

        def tick() -> None:
            out.extend(self.audit())
            if self.clock.pending:
                self.clock.call_later(interval_ns, tick)

        self.clock.call_later(interval_ns, tick)
        return out
