from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uswap.config import Config
from uswap.errors import CapExceeded, NotBlocked, StackBudgetExceeded
from uswap.lwt import (
    FIRST_ENTRY,
    Compute,
    ErrorResumed,
    Io,
    LwtClass,
    LwtState,
    Park,
    Runtime,
    Sleep,
    Try,
    YieldCpu,
    spawn_many,
)
from uswap.simclock import SimClock


def noop():
    return
    yield


def make_rt(**cfg):
    clock = SimClock()
    rt = Runtime(clock, Config({"lwt.switch_ns": 0, **cfg}))
    return clock, rt


def test_compute_charges_virtual_time():
    clock, rt = make_rt()
    lane = rt.add_lane()
    done = []

    def body():
        yield Compute(700)
        done.append(clock.now())

    rt.spawn(lane, body)
    clock.run()
    assert done == [700]
    assert lane.busy_ns == 700


def test_switch_cost_applies_per_dispatch():
    clock, rt = make_rt(**{"lwt.switch_ns": 500})
    lane = rt.add_lane()
    stamps = []

    def body(tag):
        stamps.append((tag, clock.now()))
        yield Compute(100)

    rt.spawn(lane, lambda: body("a"))
    rt.spawn(lane, lambda: body("b"))
    clock.run()
    assert stamps == [("a", 500), ("b", 1100)]


def test_cap_per_lane():
    _, rt = make_rt(**{"lwt.cap_per_lane": 2})
    lane = rt.add_lane()
    rt.spawn(lane, noop)
    rt.spawn(lane, noop)
    with pytest.raises(CapExceeded):
        rt.spawn(lane, noop)
    # swap-in LWTs are outside the cap
    rt.spawn(lane, noop, LwtClass.SWAP_IN)


def test_stack_budget_limit():
    _, rt = make_rt()
    lane = rt.add_lane()
    with pytest.raises(StackBudgetExceeded):
        rt.spawn(lane, noop, stack_budget=64 * 1024)


def test_priority_order_on_one_lane():
    clock, rt = make_rt()
    lane = rt.add_lane()
    order = []

    def tagged(tag):
        order.append(tag)
        yield Compute(1)

    rt.spawn(lane, lambda: tagged("first"))
    rt.spawn(lane, lambda: tagged("n1"))
    rt.spawn(lane, lambda: tagged("s1"), LwtClass.SWAP_IN)
    rt.spawn(lane, lambda: tagged("n2"))
    rt.spawn(lane, lambda: tagged("s2"), LwtClass.SWAP_IN)
    clock.run()
    # "first" was dispatched on spawn; the rest follow priority then FIFO
    assert order == ["first", "s1", "s2", "n1", "n2"]


def test_park_and_wake_into_faulting_queue():
    clock, rt = make_rt()
    lane = rt.add_lane()
    order = []

    def sleeper():
        yield Park("wait")
        order.append("woken")

    def other():
        order.append("other")
        yield Compute(10)

    lid = rt.spawn(lane, sleeper)
    clock.run()
    assert rt.lwts[lid].state is LwtState.BLOCKED
    rt.spawn(lane, other)
    rt.wake(lid, LwtClass.FAULTING_RESUMED)
    clock.run()
    # the idle lane picked "other" at spawn, before the wake
    assert order == ["other", "woken"]
    with pytest.raises(NotBlocked):
        rt.wake(10_000)


def test_faulting_resumed_beats_normal():
    clock, rt = make_rt()
    lane = rt.add_lane()
    order = []

    def parked():
        yield Park()
        order.append("resumed")

    def normal(i):
        order.append(f"n{i}")
        yield Compute(5)

    def driver():
        # occupies the lane while the queue fills
        yield Compute(1)
        rt.spawn(lane, lambda: normal(1))
        rt.wake(pid, LwtClass.FAULTING_RESUMED)
        rt.spawn(lane, lambda: normal(2))
        yield Compute(1)

    pid = rt.spawn(lane, parked)
    clock.run()
    rt.spawn(lane, driver)
    clock.run()
    assert order == ["resumed", "n1", "n2"]


def test_io_sleep_and_yield():
    clock, rt = make_rt()
    lane = rt.add_lane()
    log = []

    def io_body():
        value = yield Io(lambda done: clock.call_later(300, done, "payload", None))
        log.append(("io", value, clock.now()))
        yield Sleep(50)
        log.append(("slept", clock.now()))
        yield YieldCpu()
        log.append(("yielded", clock.now()))

    rt.spawn(lane, io_body)
    clock.run()
    assert log == [("io", "payload", 300), ("slept", 350), ("yielded", 350)]


def test_io_error_raises_inside_body():
    clock, rt = make_rt()
    lane = rt.add_lane()
    caught = []

    def body():
        try:
            yield Io(lambda done: clock.call_later(1, done, None, RuntimeError("dev")))
        except RuntimeError as exc:
            caught.append(str(exc))

    rt.spawn(lane, body)
    clock.run()
    assert caught == ["dev"]


def test_try_returns_body_value_and_pops_scope():
    clock, rt = make_rt()
    lane = rt.add_lane()
    seen = []

    def inner():
        yield Compute(1)
        return 42

    def body():
        value = yield Try(inner, "t")
        seen.append((value, len(rt.lwts[lid].scopes)))

    lid = rt.spawn(lane, body)
    clock.run()
    assert seen == [(42, 0)]


def test_rewind_restores_scope_entry():
    clock, rt = make_rt()
    lane = rt.add_lane()
    counters = {"before": 0, "inside": 0, "after": 0}
    results = []

    def inner():
        counters["inside"] += 1
        yield Park("victim")
        counters["after"] += 1
        return "unreached"

    def body():
        counters["before"] += 1
        out = yield Try(inner, "g")
        results.append(out)

    lid = rt.spawn(lane, body)
    clock.run()
    lwt = rt.lwts[lid]
    assert lwt.state is LwtState.BLOCKED and len(lwt.scopes) == 1
    rt.rewind(lwt, "boom")
    rt.wake(lid, LwtClass.FAULTING_RESUMED)
    clock.run()
    assert results == [ErrorResumed("boom")]
    # the code before the scope ran once and the suspended remainder never ran
    assert counters == {"before": 1, "inside": 1, "after": 0}


def test_nested_scopes_bind_innermost():
    clock, rt = make_rt()
    lane = rt.add_lane()
    trail = []

    def innermost():
        yield Park()

    def middle():
        out = yield Try(innermost, "inner")
        trail.append(("inner", out))
        return "middle-done"

    def body():
        out = yield Try(middle, "outer")
        trail.append(("outer", out))

    lid = rt.spawn(lane, body)
    clock.run()
    lwt = rt.lwts[lid]
    assert [s.tag for s in lwt.scopes] == ["outer", "inner"]
    rt.rewind(lwt, "e")
    rt.wake(lid)
    clock.run()
    assert trail == [("inner", ErrorResumed("e")), ("outer", "middle-done")]


def test_try_enter_returns_first_entry():
    _, rt = make_rt()
    lane = rt.add_lane()
    lid = rt.spawn(lane, noop)
    assert rt.try_enter(rt.lwts[lid]) is FIRST_ENTRY


def test_kill_ready_and_blocked():
    clock, rt = make_rt()
    lane = rt.add_lane()
    ran = []

    def parked():
        yield Park()
        ran.append("parked")

    def queued():
        ran.append("queued")
        yield Compute(1)

    a = rt.spawn(lane, parked)
    clock.run()
    b = rt.spawn(lane, queued)
    lwt_a, lwt_b = rt.lwts[a], rt.lwts[b]
    rt.kill(lwt_b)
    rt.kill(lwt_a)
    clock.run()
    assert ran == []
    assert lane.live_normal == 0 and lane.terminated == 2
    assert lwt_a.state is LwtState.TERMINATED


def test_unhandled_exception_propagates():
    clock, rt = make_rt()
    lane = rt.add_lane()

    def body():
        yield Compute(1)
        raise KeyError("x")

    rt.spawn(lane, body)
    with pytest.raises(KeyError):
        clock.run()


def test_spawn_many_and_state_counts():
    clock, rt = make_rt()
    lane = rt.add_lane()
    ids = spawn_many(rt, lane, [noop] * 3)
    assert len(ids) == 3
    clock.run()
    counts = rt.state_counts(lane)
    assert counts[LwtState.TERMINATED] == 3


def test_unsupported_request():
    clock, rt = make_rt()
    lane = rt.add_lane()

    def body():
        yield "nonsense"

    rt.spawn(lane, body)
    with pytest.raises(TypeError):
        clock.run()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["n", "s", "w"]), st.integers(1, 50)), min_size=1, max_size=40))
def test_priority_never_violated_with_live_lwts(plan):
    clock, rt = make_rt(**{"lwt.cap_per_lane": 1000})
    rt.check_priority = True
    rt.dispatch_log = []
    lane = rt.add_lane()
    parked = []

    def worker(ns):
        yield Compute(ns)

    def parker():
        yield Park()

    for kind, ns in plan:
        if kind == "n":
            rt.spawn(lane, lambda ns=ns: worker(ns))
        elif kind == "s":
            rt.spawn(lane, lambda ns=ns: worker(ns), LwtClass.SWAP_IN)
        else:
            parked.append(rt.spawn(lane, parker))
        clock.run(until=clock.now() + ns // 2)
    clock.run()
    for lid in parked:
        if lid in rt.lwts and rt.lwts[lid].state is LwtState.BLOCKED:
            rt.wake(lid, LwtClass.FAULTING_RESUMED)
    clock.run()
    assert lane.live_normal == 0
    assert len(rt.dispatch_log) >= len(plan)
