"""Access-bit scanning and hot/cold classification (the memory-migration daemon).

Each scan records, for every present page of a swappable space, whether its
accessed bit was set, then clears the bit.  A page is *hot* when the bit was
seen set at both of the last two scans and *cold* otherwise.  Pages not
observed at both of those scans (never scanned, or remapped since) are not
classified at all.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Any

from .config import Config
from .errors import InsufficientScans, NotSwappable
from .fault_engine import AddressSpace, FaultEngine

if TYPE_CHECKING:
    from .swap_core import SwapCore


class ScanState:
    """Per-page ``(frame, previous bit, last bit, epoch of last bit)``."""

    __slots__ = ("epoch", "pages")

    def __init__(self) -> None:
        self.epoch = 0
        self.pages: dict[int, tuple[int, bool, bool, int]] = {}

    def last_two_bits(self, vpn: int) -> tuple[bool, bool] | None:
        rec = self.pages.get(vpn)
        if rec is None:
            return None
        return rec[1], rec[2]


class ColdScanner:
    def __init__(self, engine: FaultEngine, config: Config | None = None,
                 swap: "SwapCore | None" = None):
        self.engine = engine
        self.config = config or Config()
        self.swap = swap
        self.interval_ns: int = self.config["scan.interval_us"] * 1000
        self.threshold_pages: int = self.config["scan.low_mem_threshold_pages"]
        self.states: dict[int, ScanState] = {}
        self.scans = 0
        self.notifications = 0
        self._timer_running = False

    def state(self, space: AddressSpace) -> ScanState:
        st = self.states.get(space.app_id)
        if st is None:
            st = self.states[space.app_id] = ScanState()
        return st

    def scan_once(self, space: AddressSpace) -> int:
        """Test-and-clear every present page's accessed bit."""
        if not space.swappable:
            raise NotSwappable(f"app {space.app_id} is not swappable")
        st = self.state(space)
        epoch = st.epoch + 1
        prev_epoch = st.epoch
        pages = st.pages
        observed = 0
        for vpn, pte in space.table.items():
            if not pte.present:
                continue
            bit = pte.accessed
            pte.accessed = False
            rec = pages.get(vpn)
            if rec is not None and rec[0] == pte.frame and rec[3] == prev_epoch:
                pages[vpn] = (pte.frame, rec[2], bit, epoch)
            else:
                # first observation of this mapping: no previous bit
                pages[vpn] = (pte.frame, None, bit, epoch)
            observed += 1
        st.epoch = epoch
        self.scans += 1
        return observed

    def classify(self, space: AddressSpace) -> dict[str, set[int]]:
        st = self.state(space)
        if st.epoch < 2:
            raise InsufficientScans(f"app {space.app_id} scanned {st.epoch} times")
        hot: set[int] = set()
        cold: set[int] = set()
        epoch = st.epoch
        table = space.table
        for vpn, (frame, prev, last, seen) in st.pages.items():
            if seen != epoch or prev is None:
                continue
            pte = table[vpn]
            if not pte.present or pte.frame != frame:
                continue
            (hot if (prev and last) else cold).add(vpn)
        return {"hot": hot, "cold": cold}

    def ensure_scanned(self, space: AddressSpace) -> None:
        st = self.state(space)
        while st.epoch < 2:
            self.scan_once(space)

    def rescan(self, spaces: list[AddressSpace]) -> dict[int, dict[str, set[int]]]:
        out = {}
        for space in spaces:
            self.scan_once(space)
            self.ensure_scanned(space)
            out[space.app_id] = self.classify(space)
            if self.swap is not None:
                self.swap.notify_cold(space, out[space.app_id]["cold"], out[space.app_id]["hot"])
        return out

    def targets(self) -> list[AddressSpace]:
        swappable = [s for s in self.engine.spaces.values() if s.swappable and not s.terminated]
        over = [s for s in swappable if s.over_quota()]
        return over or swappable

    def on_memory_pressure(self, available_pages: int, threshold: int | None = None) -> dict[int, set[int]]:
        """Below threshold (or an app over quota): classify and hand cold sets to swap."""
        threshold = self.threshold_pages if threshold is None else threshold
        swappable = [s for s in self.engine.spaces.values() if s.swappable and not s.terminated]
        over = [s for s in swappable if s.over_quota()]
        if available_pages >= threshold and not over:
            return {}
        targets = over or swappable
        out: dict[int, set[int]] = {}
        for space in targets:
            self.ensure_scanned(space)
            classes = self.classify(space)
            out[space.app_id] = classes["cold"]
            if self.swap is not None:
                self.swap.notify_cold(space, classes["cold"], classes["hot"])
        self.notifications += 1
        return out

    # periodic scanning on the virtual clock ----------------------------
    def start(self) -> None:
        if self._timer_running:
            return
        self._timer_running = True
        self.engine.clock.call_later(self.interval_ns, self._tick)

    def stop(self) -> None:
        self._timer_running = False

    def _tick(self) -> None:
        if not self._timer_running:
            return
        for space in self.engine.spaces.values():
            if space.swappable and not space.terminated:
                self.scan_once(space)
        self.engine.clock.call_later(self.interval_ns, self._tick)


def replay_classify(trace: list[set[int]], present: set[int]) -> dict[str, set[int]]:
    """Reference classification straight from a touch trace.

    ``trace[e]`` is the set of pages touched before scan ``e``; every page in
    ``present`` stays mapped throughout.
    """
    if len(trace) < 2:
        raise InsufficientScans("need two scans")
    before_last, last = trace[-2], trace[-1]
    hot = {v for v in present if v in before_last and v in last}
    return {"hot": hot, "cold": present - hot}


def describe(space: AddressSpace, scanner: ColdScanner) -> dict[str, Any]:
    st = scanner.state(space)
    return {"app_id": space.app_id, "epoch": st.epoch, "tracked": len(st.pages)}
