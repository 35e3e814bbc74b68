"""User-space swapping on lightweight threads, simulated on a virtual clock."""

from .backend_store import BackendStore
from .cache_app import CacheApp
from .coldscan import ColdScanner
from .config import DEFAULTS, Config
from .fault_engine import AccessKind, AddressSpace, FaultEngine
from .fault_tolerance import ErrorKind, FaultTolerance, Outcome, PagingError
from .lwt import Access, Compute, Io, Park, Runtime, Sleep, Try, YieldCpu
from .simclock import SimClock
from .swap_core import SwapCore
from .system import System

__all__ = [
    "Access", "AccessKind", "AddressSpace", "BackendStore", "CacheApp", "ColdScanner", "Compute",
    "Config", "DEFAULTS", "ErrorKind", "FaultEngine", "FaultTolerance", "Io", "Outcome",
    "PagingError", "Park", "Runtime", "SimClock", "Sleep", "SwapCore", "System", "Try", "YieldCpu",
]
__version__ = "0.1.0"
