"""Non-preemptive lightweight threads with a three-queue priority scheduler.

An LWT body is a generator.  It talks to the runtime by yielding request
objects (:class:`Compute`, :class:`Access`, :class:`Io`, :class:`Try`, ...);
the runtime interprets each request against the virtual clock and resumes the
generator with the result.  The generator stack *is* the saved context, so a
suspend point is always an operation boundary.

Ready LWTs wait in one of three FIFO queues.  ``schedule_next`` always drains
``swap_in_q`` first, then ``faulting_q``, then ``normal_q``.
"""

from __future__ import annotations

import enum
import itertools
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Generator, Iterable

from .config import Config
from .errors import CapExceeded, NotBlocked, StackBudgetExceeded
from .simclock import SimClock


class LwtState(enum.Enum):
    READY = "ready"
    RUNNING = "running"
    BLOCKED = "blocked"
    TERMINATED = "terminated"


class LwtClass(enum.Enum):
    NORMAL = "normal"
    SWAP_IN = "swap_in"
    FAULTING_RESUMED = "faulting_resumed"


IDLE = None


# --- requests an LWT body may yield ---------------------------------------


@dataclass(slots=True)
class Compute:
    """Burn ``ns`` of CPU on the lane."""

    ns: int


@dataclass(slots=True)
class Access:
    """Load (``data is None``) or store to simulated memory."""

    space: Any
    addr: int
    size: int = 0
    data: bytes | None = None


@dataclass(slots=True)
class Io:
    """Start asynchronous work and sleep until ``done(value, exc)`` fires.

    ``submit`` receives the completion callback and must arrange for it to be
    called exactly once, typically from a clock event.
    """

    submit: Callable[[Callable[[Any, BaseException | None], None]], None]


@dataclass(slots=True)
class Sleep:
    ns: int


@dataclass(slots=True)
class Park:
    """Block until someone calls :meth:`Runtime.wake`."""

    reason: str = "park"


@dataclass(slots=True)
class YieldCpu:
    pass


@dataclass(slots=True)
class Try:
    """Run ``body()`` inside a protected scope.

    The yield evaluates to the body's return value, or to an
    :class:`ErrorResumed` when a paging error rewound the scope.
    """

    body: Callable[[], Generator]
    tag: str = ""


class FirstEntry:
    __slots__ = ()

    def __repr__(self) -> str:
        return "FirstEntry"


FIRST_ENTRY = FirstEntry()


@dataclass(frozen=True, slots=True)
class ErrorResumed:
    error: Any


@dataclass(slots=True)
class TryScope:
    owner_lwt: int
    depth: int
    tag: str = ""
    error_slot: Any = None
    nesting_depth: int = 0


# --- control blocks -------------------------------------------------------


class Lwt:
    __slots__ = (
        "id", "lane", "state", "klass", "origin", "frames", "scopes", "pending",
        "resume_value", "resume_exc", "stack_budget", "name", "app", "tag",
        "epoch", "blocked_reason", "pending_errors", "on_exit", "spawned_at",
        "error",
    )

    def __init__(self, lid: int, lane: "WorkerLane", klass: LwtClass, gen: Generator,
                 stack_budget: int, name: str, app: Any):
        self.id = lid
        self.lane = lane
        self.state = LwtState.READY
        self.klass = klass
        self.origin = klass
        self.frames: list[Generator] = [gen]
        self.scopes: list[TryScope] = []
        # an access to re-execute when resumed after a fault
        self.pending: Access | None = None
        self.resume_value: Any = None
        self.resume_exc: BaseException | None = None
        self.stack_budget = stack_budget
        self.name = name
        self.app = app
        # free-form marker for instrumentation (e.g. the cache op being served)
        self.tag: str = ""
        # bumped on rewind/kill so stale continuations are ignored
        self.epoch = 0
        self.blocked_reason: str | None = None
        self.pending_errors: deque = deque()
        self.on_exit: Callable[["Lwt"], None] | None = None
        self.spawned_at = 0
        self.error: BaseException | None = None

    @property
    def saved_context(self) -> tuple:
        return (tuple(self.frames), self.pending)

    def __repr__(self) -> str:
        return f"Lwt({self.id}, {self.name}, {self.state.value}, {self.klass.value})"


class ReadyQueues:
    __slots__ = ("swap_in_q", "faulting_q", "normal_q")

    def __init__(self) -> None:
        self.swap_in_q: deque[int] = deque()
        self.faulting_q: deque[int] = deque()
        self.normal_q: deque[int] = deque()

    def for_class(self, klass: LwtClass) -> deque:
        if klass is LwtClass.SWAP_IN:
            return self.swap_in_q
        if klass is LwtClass.FAULTING_RESUMED:
            return self.faulting_q
        return self.normal_q

    def __len__(self) -> int:
        return len(self.swap_in_q) + len(self.faulting_q) + len(self.normal_q)

    def members(self) -> list[int]:
        return [*self.swap_in_q, *self.faulting_q, *self.normal_q]


class WorkerLane:
    def __init__(self, lane_id: int, lwt_cap: int, kind: str = "worker"):
        self.lane_id = lane_id
        self.kind = kind
        self.queues = ReadyQueues()
        self.default_context: tuple | None = None
        self.lwt_cap = lwt_cap
        self.current: Lwt | None = None
        self.live_normal = 0
        # set between a fault and PF-entry; the lane is inside the kernel hook
        self.in_fault = False
        # blocking baseline: the whole carrier waits while a fault is served
        self.stalled = False
        self.pending_errors: deque = deque()
        self.spawned = 0
        self.terminated = 0
        self.dispatches = 0
        self.busy_ns = 0
        self.live: dict[int, Lwt] = {}

    def __repr__(self) -> str:
        return f"WorkerLane({self.lane_id}, {self.kind})"


# --- runtime --------------------------------------------------------------


class Runtime:
    """Owns every lane and interprets LWT requests on the shared clock."""

    def __init__(self, clock: SimClock, config: Config | None = None):
        self.clock = clock
        self.config = config or Config()
        self.switch_ns: int = self.config["lwt.switch_ns"]
        self.max_stack: int = self.config["lwt.stack_budget_bytes"]
        self.cap: int = self.config["lwt.cap_per_lane"]
        self.lanes: list[WorkerLane] = []
        self.lwts: dict[int, Lwt] = {}
        self._ids = itertools.count()
        # set by the fault engine: access(lwt, req) -> (hit, value)
        self.memory: Any = None
        # set by the fault-tolerance layer: deliver(lwt, error) at boundaries
        self.errors: Any = None
        self.check_priority = False
        self.dispatch_log: list | None = None
        # Idle lanes park; wake/spawn re-kick them.

    # lanes -------------------------------------------------------------
    def add_lane(self, kind: str = "worker", lwt_cap: int | None = None) -> WorkerLane:
        lane = WorkerLane(len(self.lanes), self.cap if lwt_cap is None else lwt_cap, kind)
        self.lanes.append(lane)
        if self.memory is not None:
            self.memory.pf_entry_start(lane)
        return lane

    # spawn / queues ----------------------------------------------------
    def spawn(self, lane: WorkerLane, entry: Callable[[], Generator] | Generator,
              klass: LwtClass = LwtClass.NORMAL, *, name: str = "",
              app: Any = None, stack_budget: int | None = None) -> int:
        if klass is LwtClass.NORMAL and lane.live_normal >= lane.lwt_cap:
            raise CapExceeded(f"lane {lane.lane_id} already runs {lane.lwt_cap} LWTs")
        budget = self.max_stack if stack_budget is None else stack_budget
        if budget > self.max_stack:
            raise StackBudgetExceeded(f"{budget} > {self.max_stack}")
        gen = entry() if callable(entry) else entry
        lid = next(self._ids)
        lwt = Lwt(lid, lane, klass, gen, budget, name or f"lwt{lid}", app)
        lwt.spawned_at = self.clock.now()
        self.lwts[lid] = lwt
        lane.live[lid] = lwt
        lane.spawned += 1
        if klass is LwtClass.NORMAL:
            lane.live_normal += 1
        lane.queues.for_class(klass).append(lid)
        self._kick(lane)
        return lid

    def schedule_next(self, lane: WorkerLane) -> int | None:
        """Pick the next LWT by queue priority; Ready -> Running."""
        q = lane.queues
        if q.swap_in_q:
            lid = q.swap_in_q.popleft()
        elif q.faulting_q:
            lid = q.faulting_q.popleft()
        elif q.normal_q and not lane.stalled:
            lid = q.normal_q.popleft()
        else:
            return IDLE
        if self.check_priority:
            self._assert_priority(lane, lid)
        lwt = self.lwts[lid]
        lwt.state = LwtState.RUNNING
        lane.current = lwt
        lane.dispatches += 1
        if self.dispatch_log is not None:
            self.dispatch_log.append((lane.lane_id, lid))
        return lid

    def _assert_priority(self, lane: WorkerLane, lid: int) -> None:
        klass = self.lwts[lid].klass
        q = lane.queues
        if klass is not LwtClass.SWAP_IN and q.swap_in_q:
            raise AssertionError("dispatched below swap_in_q")
        if klass is LwtClass.NORMAL and q.faulting_q:
            raise AssertionError("dispatched normal while faulting_q non-empty")

    def yield_now(self, lwt: Lwt) -> None:
        self._require_running(lwt)
        lwt.state = LwtState.READY
        lwt.lane.current = None
        lwt.lane.queues.for_class(lwt.klass).append(lwt.id)

    def block_current(self, lwt: Lwt, reason: str) -> None:
        self._require_running(lwt)
        lwt.state = LwtState.BLOCKED
        lwt.blocked_reason = reason
        if lwt.lane.current is lwt:
            lwt.lane.current = None

    def wake(self, lid: int, target_class: LwtClass | None = None) -> None:
        lwt = self.lwts.get(lid)
        if lwt is None or lwt.state is not LwtState.BLOCKED:
            raise NotBlocked(f"LWT {lid} is not blocked")
        if target_class is not None:
            lwt.klass = target_class
        lwt.state = LwtState.READY
        lwt.blocked_reason = None
        lwt.lane.queues.for_class(lwt.klass).append(lid)
        self._kick(lwt.lane)

    def kill(self, lwt: Lwt, error: BaseException | None = None) -> None:
        """Terminate ``lwt`` wherever it is, discarding its continuation."""
        if lwt.state is LwtState.TERMINATED:
            return
        lane = lwt.lane
        if lwt.state is LwtState.READY:
            for q in (lane.queues.swap_in_q, lane.queues.faulting_q, lane.queues.normal_q):
                try:
                    q.remove(lwt.id)
                except ValueError:
                    pass
        lwt.epoch += 1
        lwt.error = error
        for gen in reversed(lwt.frames):
            gen.close()
        lwt.frames.clear()
        lwt.scopes.clear()
        lwt.pending = None
        was_current = lane.current is lwt
        self._finish(lwt)
        if was_current and not lane.in_fault:
            self._kick(lane)

    def _require_running(self, lwt: Lwt) -> None:
        if lwt.state is not LwtState.RUNNING:
            raise RuntimeError(f"{lwt} is not running")

    # try scopes --------------------------------------------------------
    def try_enter(self, lwt: Lwt, tag: str = "") -> FirstEntry:
        lwt.scopes.append(TryScope(lwt.id, len(lwt.frames), tag, None, len(lwt.scopes)))
        return FIRST_ENTRY

    def rewind(self, lwt: Lwt, error: Any) -> None:
        """Unwind to the innermost scope's entry; its ``Try`` yields ErrorResumed."""
        scope = lwt.scopes.pop()
        scope.error_slot = error
        while len(lwt.frames) > scope.depth:
            lwt.frames.pop().close()
        lwt.pending = None
        lwt.resume_exc = None
        lwt.resume_value = ErrorResumed(error)
        lwt.epoch += 1

    # execution ---------------------------------------------------------
    def _kick(self, lane: WorkerLane) -> None:
        if lane.current is None and not lane.in_fault:
            self._dispatch(lane)

    def _dispatch(self, lane: WorkerLane) -> None:
        if lane.current is not None or lane.in_fault:
            return
        lid = self.schedule_next(lane)
        if lid is IDLE:
            return
        lwt = self.lwts[lid]
        self.clock.call_later(self.switch_ns, self._resume, lwt, lwt.epoch)

    def _resume(self, lwt: Lwt, epoch: int) -> None:
        if lwt.epoch != epoch or lwt.state is not LwtState.RUNNING:
            return
        lane = lwt.lane
        if lane.pending_errors and self.errors is not None and lwt.origin is LwtClass.NORMAL:
            while lane.pending_errors:
                lwt.pending_errors.append(lane.pending_errors.popleft())
        if lwt.pending_errors and self.errors is not None:
            if not self.errors.deliver(lwt):
                return
        req = lwt.pending
        if req is not None:
            lwt.pending = None
            self._access(lwt, req)
            return
        value, exc = lwt.resume_value, lwt.resume_exc
        lwt.resume_value = lwt.resume_exc = None
        self._run(lwt, value, exc)

    def _cont(self, lwt: Lwt, epoch: int, value: Any = None) -> None:
        if lwt.epoch != epoch:
            return
        if lwt.pending_errors and self.errors is not None:
            if not self.errors.deliver(lwt):
                return
            value = lwt.resume_value
            lwt.resume_value = None
        self._run(lwt, value, None)

    def _access(self, lwt: Lwt, req: Access) -> None:
        hit, value = self.memory.access(lwt, req)
        if hit:
            self.clock.call_later(self.memory.access_ns, self._cont, lwt, lwt.epoch, value)
        else:
            lwt.pending = req

    def _run(self, lwt: Lwt, value: Any, exc: BaseException | None) -> None:
        clock = self.clock
        while True:
            gen = lwt.frames[-1]
            try:
                if exc is not None:
                    e, exc = exc, None
                    req = gen.throw(e)
                else:
                    req = gen.send(value)
            except StopIteration as stop:
                value = stop.value
                lwt.frames.pop()
                scopes = lwt.scopes
                if scopes and scopes[-1].depth == len(lwt.frames):
                    scopes.pop()
                if not lwt.frames:
                    self._finish(lwt)
                    self._kick(lwt.lane)
                    return
                continue
            except Exception as err:  # propagate into the calling frame
                lwt.frames.pop()
                scopes = lwt.scopes
                if scopes and scopes[-1].depth == len(lwt.frames):
                    scopes.pop()
                if not lwt.frames:
                    lwt.error = err
                    self._finish(lwt)
                    self._kick(lwt.lane)
                    raise
                exc = err
                value = None
                continue

            kind = type(req)
            if kind is Compute:
                lwt.lane.busy_ns += req.ns
                clock.call_later(req.ns, self._cont, lwt, lwt.epoch, None)
                return
            if kind is Access:
                self._access(lwt, req)
                return
            if kind is Try:
                self.try_enter(lwt, req.tag)
                lwt.frames.append(req.body())
                value = None
                continue
            if kind is Io:
                self.block_current(lwt, "io")
                req.submit(self._io_callback(lwt))
                self._kick(lwt.lane)
                return
            if kind is Sleep:
                self.block_current(lwt, "sleep")
                clock.call_later(req.ns, self._timer_wake, lwt, lwt.epoch)
                self._kick(lwt.lane)
                return
            if kind is Park:
                self.block_current(lwt, req.reason)
                self._kick(lwt.lane)
                return
            if kind is YieldCpu:
                self.yield_now(lwt)
                self._kick(lwt.lane)
                return
            raise TypeError(f"{lwt} yielded unsupported request {req!r}")

    def _io_callback(self, lwt: Lwt) -> Callable[[Any, BaseException | None], None]:
        epoch = lwt.epoch

        def done(value: Any = None, exc: BaseException | None = None) -> None:
            if lwt.epoch != epoch or lwt.state is not LwtState.BLOCKED:
                return
            lwt.resume_value = value
            lwt.resume_exc = exc
            self.wake(lwt.id, lwt.klass)

        return done

    def _timer_wake(self, lwt: Lwt, epoch: int) -> None:
        if lwt.epoch == epoch and lwt.state is LwtState.BLOCKED:
            self.wake(lwt.id, lwt.klass)

    def _finish(self, lwt: Lwt) -> None:
        lane = lwt.lane
        lwt.state = LwtState.TERMINATED
        if lwt.pending_errors:
            # undelivered errors go back to the lane so exactly-once still holds
            lane.pending_errors.extendleft(reversed(lwt.pending_errors))
            lwt.pending_errors.clear()
        if lane.current is lwt:
            lane.current = None
        lane.live.pop(lwt.id, None)
        lane.terminated += 1
        if lwt.origin is LwtClass.NORMAL:
            lane.live_normal -= 1
        self.lwts.pop(lwt.id, None)
        if lwt.on_exit is not None:
            lwt.on_exit(lwt)

    # introspection -----------------------------------------------------
    def state_counts(self, lane: WorkerLane) -> dict[LwtState, int]:
        counts = {s: 0 for s in LwtState}
        for lwt in lane.live.values():
            counts[lwt.state] += 1
        counts[LwtState.TERMINATED] = lane.terminated
        return counts

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None) -> int:
        return self.clock.run(until=until, stop=stop)


def spawn_many(rt: Runtime, lane: WorkerLane, bodies: Iterable[Callable[[], Generator]]) -> list[int]:
    return [rt.spawn(lane, body) for body in bodies]
