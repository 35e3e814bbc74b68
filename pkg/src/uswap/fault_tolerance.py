"""Paging-error delivery into protected scopes, and error-injection campaigns.

An LWT protects a stretch of code with ``result = yield Try(body)``.  When a
paging error reaches it inside the body, the runtime unwinds the body's
frames and the ``Try`` evaluates to ``ErrorResumed(error)``; the caller then
runs its recovery code.  An error that finds no scope terminates the app.

Every error ends in exactly one recorded outcome.  Errors aimed at an LWT
that is not running wait in a queue and are delivered when it is next
dispatched; errors aimed at an idle lane go to whichever LWT it runs next.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable

import numpy as np
from scipy.stats import norm

from .errors import NotMapped, SwapInError
from .fault_engine import PAGE_SHIFT, PAGE_SIZE, AddressSpace, FaultEngine, FaultInfo
from .lwt import Lwt, LwtClass, LwtState, Runtime

if TYPE_CHECKING:
    from .swap_core import SwapCore


class ErrorKind(enum.Enum):
    MEMORY_UCE = "MemoryUce"
    SWAP_IN = "SwapInError"


ERROR_CODES = {ErrorKind.MEMORY_UCE: 0x51, ErrorKind.SWAP_IN: 0x52}


class Outcome(enum.Enum):
    SURVIVED = "survived"
    TERMINATED = "terminated"


@dataclass(eq=False)
class PagingError:
    kind: ErrorKind
    fault_addr: int
    error_code: int
    app_id: int
    seq: int = 0
    cause: BaseException | None = None

    @property
    def vpn(self) -> int:
        return self.fault_addr >> PAGE_SHIFT


class FaultTolerance:
    """Routes paging errors to scopes and keeps the outcome ledger.

    ``policy="terminate"`` kills every LWT of an app that takes an unhandled
    error and marks its space terminated.  ``policy="campaign"`` records the
    termination but only kills the LWT that took the error, so an injection
    campaign can keep measuring.
    """

    def __init__(self, runtime: Runtime, engine: FaultEngine, swap: "SwapCore | None" = None,
                 policy: str = "terminate"):
        if policy not in ("terminate", "campaign"):
            raise ValueError(f"unknown policy {policy!r}")
        self.runtime = runtime
        self.engine = engine
        self.swap = swap
        self.policy = policy
        runtime.errors = self
        if swap is not None:
            swap.tolerance = self
        self._seq = itertools.count(1)
        self.errors: dict[int, PagingError] = {}
        self.outcomes: dict[int, Outcome] = {}
        self.terminated_apps: set[int] = set()
        # called as on_terminate(app_id) when an app is torn down
        self.on_terminate: Callable[[int], None] | None = None
        # called as on_outcome(error, outcome) whenever an outcome is (re)recorded
        self.on_outcome: Callable[[PagingError, Outcome], None] | None = None

    # construction ------------------------------------------------------
    def _new_error(self, kind: ErrorKind, space: AddressSpace, addr: int,
                   cause: BaseException | None = None) -> PagingError:
        err = PagingError(kind, addr, ERROR_CODES[kind], space.app_id, next(self._seq), cause)
        self.errors[err.seq] = err
        return err

    def _record(self, err: PagingError, outcome: Outcome) -> None:
        self.outcomes[err.seq] = outcome
        if self.on_outcome is not None:
            self.on_outcome(err, outcome)

    # raising -------------------------------------------------------------
    def raise_uce(self, space: AddressSpace, addr: int) -> PagingError:
        """Poison the page at ``addr``: isolate its frame, map a zero frame, notify."""
        vpn = addr >> PAGE_SHIFT
        pte = space.pte(vpn)
        if not pte.present:
            raise NotMapped(f"addr {addr:#x} not present")
        engine = self.engine
        engine.isolated_frames.add(pte.frame)
        del engine.frames[pte.frame]
        pte.frame = engine.alloc_frame()
        pte.dirty = True
        pte.backed = False
        err = self._new_error(ErrorKind.MEMORY_UCE, space, addr)
        region = space.region_of(vpn)
        if region.owner_lane is None:
            self._unhandled(None, err)
            return err
        lane = self.runtime.lanes[region.owner_lane]
        cur = lane.current
        if cur is not None and cur.state is LwtState.RUNNING and cur.origin is LwtClass.NORMAL:
            cur.pending_errors.append(err)
        else:
            lane.pending_errors.append(err)
        return err

    def raise_swapin_error(self, info: FaultInfo, cause: SwapInError | BaseException) -> PagingError:
        err = self._new_error(ErrorKind.SWAP_IN, info.space, info.vpn << PAGE_SHIFT, cause)
        lwt = info.lwt
        if lwt.state is LwtState.TERMINATED:
            self._record(err, Outcome.TERMINATED)
            return err
        if lwt.scopes:
            lwt.pending_errors.append(err)
            if lwt.state is LwtState.BLOCKED:
                self.runtime.wake(lwt.id, LwtClass.FAULTING_RESUMED)
        else:
            self._unhandled(lwt, err)
        return err

    # delivery ------------------------------------------------------------
    def deliver(self, lwt: Lwt) -> bool:
        """Runtime hook at a dispatch boundary; False when ``lwt`` was killed."""
        err = lwt.pending_errors.popleft()
        if lwt.scopes:
            self.runtime.rewind(lwt, err)
            # provisional: the recovery code may still escalate
            self._record(err, Outcome.SURVIVED)
            return True
        self._unhandled(lwt, err)
        return False

    def escalate(self, lwt: Lwt | None, err: PagingError) -> None:
        """Recovery code gives up on ``err``; the app goes down.

        Called from inside ``lwt``'s own body, so ``lwt`` itself is left to
        return on its own.
        """
        self._record(err, Outcome.TERMINATED)
        if self.policy == "terminate":
            self.terminate_app(err.app_id, err, spare=lwt)

    def _unhandled(self, lwt: Lwt | None, err: PagingError) -> None:
        self._record(err, Outcome.TERMINATED)
        if self.policy == "campaign":
            if lwt is not None:
                self.runtime.kill(lwt, err)
            return
        self.terminate_app(err.app_id, err)

    def terminate_app(self, app_id: int, err: Any = None, spare: Lwt | None = None) -> None:
        space = self.engine.spaces.get(app_id)
        if space is not None:
            space.terminated = True
        self.terminated_apps.add(app_id)
        for lwt in list(self.runtime.lwts.values()):
            if lwt is not spare and _app_id(lwt.app) == app_id:
                self.runtime.kill(lwt, err)
        if self.on_terminate is not None:
            self.on_terminate(app_id)

    def drain(self) -> int:
        """Errors still queued on idle lanes at shutdown land outside any scope."""
        n = 0
        for lane in self.runtime.lanes:
            while lane.pending_errors:
                self._unhandled(None, lane.pending_errors.popleft())
                n += 1
        for lwt in list(self.runtime.lwts.values()):
            while lwt.pending_errors and lwt.state is not LwtState.TERMINATED:
                err = lwt.pending_errors.popleft()
                self._unhandled(lwt, err)
                n += 1
        return n

    # bookkeeping -------------------------------------------------------
    def counts(self, kind: ErrorKind | None = None) -> dict[Outcome, int]:
        out = {o: 0 for o in Outcome}
        for seq, outcome in self.outcomes.items():
            if kind is None or self.errors[seq].kind is kind:
                out[outcome] += 1
        return out

    def undelivered(self) -> list[PagingError]:
        return [e for seq, e in self.errors.items() if seq not in self.outcomes]


def _app_id(app: Any) -> Any:
    return getattr(app, "app_id", app)


# --- statistics -----------------------------------------------------------


def wilson_interval(successes: int, n: int, confidence: float = 0.99) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    z = float(norm.ppf(0.5 + confidence / 2))
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


def binomial_band(p: float, n: int, confidence: float = 0.99) -> tuple[float, float]:
    """Range of observed fractions a Binomial(n, p) lands in with the given confidence."""
    z = float(norm.ppf(0.5 + confidence / 2))
    half = z * math.sqrt(p * (1 - p) / n) if n else 1.0
    return (max(0.0, p - half), min(1.0, p + half))


@dataclass
class SurvivalRow:
    kind: ErrorKind
    injected: int
    survived: int
    terminated: int

    @property
    def survived_pct(self) -> float:
        return 100.0 * self.survived / self.injected if self.injected else 0.0

    @property
    def terminated_pct(self) -> float:
        return 100.0 * self.terminated / self.injected if self.injected else 0.0

    def ci(self, confidence: float = 0.99) -> tuple[float, float]:
        lo, hi = wilson_interval(self.survived, self.injected, confidence)
        return (100.0 * lo, 100.0 * hi)


@dataclass
class SurvivalTable:
    rows: dict[ErrorKind, SurvivalRow] = field(default_factory=dict)
    expected: dict[ErrorKind, float] = field(default_factory=dict)

    def as_rows(self) -> list[dict[str, Any]]:
        out = []
        for kind, row in self.rows.items():
            lo, hi = row.ci()
            out.append({
                "kind": kind.value,
                "injected": row.injected,
                "terminated_pct": round(row.terminated_pct, 2),
                "survived_pct": round(row.survived_pct, 2),
                "ci99_low_pct": round(lo, 2),
                "ci99_high_pct": round(hi, 2),
                "expected_pct": round(100.0 * self.expected[kind], 2) if kind in self.expected else None,
            })
        return out


def survival_table(tol: FaultTolerance, injected: dict[ErrorKind, int]) -> SurvivalTable:
    table = SurvivalTable()
    for kind, n in injected.items():
        if not n:
            continue
        c = tol.counts(kind)
        table.rows[kind] = SurvivalRow(kind, n, c[Outcome.SURVIVED], c[Outcome.TERMINATED])
    return table


# --- injection --------------------------------------------------------------


@dataclass
class CampaignSpec:
    swapin_errors: int = 0
    uce_errors: int = 0
    seed: int = 1
    # Bernoulli probability that a demand swap-in read fails
    swapin_rate: float = 0.5
    # mean virtual time between UCEs
    uce_interval_ns: int = 20_000
    # restrict UCE targets to these apps (None: every swappable app)
    apps: tuple[int, ...] | None = None


class ErrorInjector:
    """Arms failures against a running system until the campaign counts are met."""

    def __init__(self, tol: FaultTolerance, swap: "SwapCore", spec: CampaignSpec):
        self.tol = tol
        self.swap = swap
        self.engine = tol.engine
        self.clock = tol.engine.clock
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.injected = {ErrorKind.SWAP_IN: 0, ErrorKind.MEMORY_UCE: 0}
        self._armed: set[tuple[int, int]] = set()
        # keys whose read just failed; their retry is not armed again
        self._retrying: set[tuple[int, int]] = set()
        self._prev_fail = swap.backend.fail
        self._active = False

    def start(self) -> None:
        self._active = True
        if self.spec.swapin_errors:
            self.swap.read_hook = self._on_demand_read
            self.swap.backend.fail = self._fail
        if self.spec.uce_errors:
            self._schedule_uce()

    def stop(self) -> None:
        self._active = False
        self.swap.read_hook = None
        self.swap.backend.fail = self._prev_fail

    @property
    def done(self) -> bool:
        return (self.injected[ErrorKind.SWAP_IN] >= self.spec.swapin_errors
                and self.injected[ErrorKind.MEMORY_UCE] >= self.spec.uce_errors)

    @property
    def settled(self) -> bool:
        """All errors injected and every armed read has fired."""
        return self.done and not self._armed

    def _on_demand_read(self, info: FaultInfo) -> None:
        if self.injected[ErrorKind.SWAP_IN] >= self.spec.swapin_errors:
            return
        if info.key in self._retrying:
            self._retrying.discard(info.key)
            return
        if self.rng.random() < self.spec.swapin_rate:
            self._armed.add(info.key)
            self.injected[ErrorKind.SWAP_IN] += 1

    def _fail(self, op: str, key: tuple[int, int]) -> bool:
        if op == "get" and key in self._armed:
            self._armed.discard(key)
            self._retrying.add(key)
            return True
        return False

    def _schedule_uce(self) -> None:
        delay = max(1, int(self.rng.exponential(self.spec.uce_interval_ns)))
        self.clock.call_later(delay, self._uce_tick)

    def _uce_tick(self) -> None:
        if not self._active or self.injected[ErrorKind.MEMORY_UCE] >= self.spec.uce_errors:
            return
        target = self._random_present_page()
        if target is not None:
            space, vpn = target
            self.tol.raise_uce(space, (vpn << PAGE_SHIFT) + int(self.rng.integers(PAGE_SIZE)))
            self.injected[ErrorKind.MEMORY_UCE] += 1
        self._schedule_uce()

    def _random_present_page(self) -> tuple[AddressSpace, int] | None:
        spaces = [s for s in self.engine.spaces.values()
                  if s.swappable and not s.terminated
                  and (self.spec.apps is None or s.app_id in self.spec.apps)]
        if not spaces:
            return None
        regions = [(s, r) for s in spaces for r in s.regions]
        ends = np.cumsum([r.npages for _, r in regions])
        for _ in range(64):
            i = int(self.rng.integers(ends[-1]))
            j = int(np.searchsorted(ends, i, side="right"))
            space, region = regions[j]
            vpn = region.start_vpn + i - (int(ends[j]) - region.npages)
            if space.table[vpn].present:
                return space, vpn
        present = [(s, v) for s in spaces for v in s.present_vpns()]
        if not present:
            return None
        return present[int(self.rng.integers(len(present)))]
