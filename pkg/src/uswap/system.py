"""One-call assembly of clock, runtime, fault engine, store, scanner and swap."""

from __future__ import annotations

from typing import Any, Mapping

from .backend_store import BackendStore
from .coldscan import ColdScanner
from .config import Config
from .fault_engine import FaultEngine
from .fault_tolerance import FaultTolerance
from .lwt import Runtime, WorkerLane
from .simclock import SimClock
from .swap_core import SwapCore


class System:
    """Everything a swapping application needs, sharing one virtual clock.

    Worker lanes come first (ids ``0..lanes-1``); the swap service lanes are
    added after them by :meth:`SwapCore.start`.
    """

    def __init__(self, config: Config | Mapping[str, Any] | None = None, *,
                 lanes: int | None = None, backend: str | None = None, mode: str | None = None,
                 policy: str = "terminate", services: bool = True):
        if not isinstance(config, Config):
            config = Config(config)
        self.config = cfg = config
        self.clock = SimClock(cfg["clock.mode"], cfg["clock.wall_scale"])
        self.runtime = Runtime(self.clock, cfg)
        self.engine = FaultEngine(self.clock, self.runtime, cfg)
        self.backend = BackendStore(self.clock, cfg, backend)
        self.scanner = ColdScanner(self.engine, cfg)
        self.swap = SwapCore(self.engine, self.backend, cfg, self.scanner, mode)
        self.tolerance = FaultTolerance(self.runtime, self.engine, self.swap, policy)
        n = cfg["lanes"] if lanes is None else lanes
        self.workers: list[WorkerLane] = [self.runtime.add_lane("worker") for _ in range(n)]
        if services:
            self.swap.start()

    def set_memory_limit(self, pages: int | None) -> None:
        self.engine.limit_pages = pages

    def run(self, until: int | None = None, stop=None) -> int:
        return self.clock.run(until=until, stop=stop)

    def close(self) -> None:
        self.backend.close()
