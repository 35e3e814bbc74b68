from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uswap.simclock import EmptyQueue, SimClock


def test_events_fire_in_time_then_insertion_order():
    clock = SimClock()
    fired = []
    clock.call_later(20, fired.append, "c")
    clock.call_later(10, fired.append, "a")
    clock.call_later(10, fired.append, "b")
    clock.run()
    assert fired == ["a", "b", "c"]
    assert clock.now() == 20


def test_negative_delay_rejected():
    with pytest.raises(ValueError):
        SimClock().schedule(-1, None)


def test_advance_to_next_returns_payloads_without_calling():
    clock = SimClock()
    calls = []
    clock.schedule(5, "x")
    clock.schedule(5, lambda: calls.append(1))
    clock.schedule(7, "y")
    batch = clock.advance_to_next()
    assert batch[0] == "x" and len(batch) == 2
    assert calls == [] and clock.now() == 5
    assert clock.advance_to_next() == ["y"]
    with pytest.raises(EmptyQueue):
        clock.advance_to_next()


def test_advance_by_refuses_to_skip():
    clock = SimClock()
    clock.schedule(10, "e")
    clock.advance_by(10)
    assert clock.now() == 10
    with pytest.raises(ValueError):
        clock.advance_by(1)


def test_cancel_and_pending():
    clock = SimClock()
    keep = clock.schedule(3, "keep")
    drop = clock.schedule(2, "drop")
    assert clock.pending == 2
    assert clock.cancel(drop)
    assert not clock.cancel(drop)
    assert clock.pending == 1
    assert clock.advance_to_next() == ["keep"]
    assert not clock.cancel(keep)


def test_run_until_stops_at_target():
    clock = SimClock()
    seen = []
    for t in (5, 15, 25):
        clock.call_later(t, seen.append, t)
    assert clock.run(until=15) == 15
    assert seen == [5, 15]
    assert clock.run_until(40) == 40
    assert seen == [5, 15, 25]


def test_submit_is_picked_up_on_next_advance():
    clock = SimClock()
    clock.submit(4, "late")
    assert clock.pending == 1
    assert clock.advance_to_next() == ["late"]


def test_bad_mode():
    with pytest.raises(ValueError):
        SimClock("sundial")


def test_wall_mode_still_orders_events():
    clock = SimClock("wall", wall_scale=0.0)
    seen = []
    clock.call_later(2, seen.append, 2)
    clock.call_later(1, seen.append, 1)
    clock.run()
    assert seen == [1, 2]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=1, max_size=60))
def test_fire_order_is_stable_sort_of_delays(delays):
    clock = SimClock()
    order = []
    for i, d in enumerate(delays):
        clock.call_later(d, order.append, i)
    clock.run()
    assert order == sorted(range(len(delays)), key=lambda i: (delays[i], i))
    assert clock.now() == max(delays)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 50)), max_size=30))
def test_nested_scheduling_is_monotone(pairs):
    clock = SimClock()
    times = []

    def outer(extra):
        times.append(clock.now())
        clock.call_later(extra, lambda: times.append(clock.now()))

    for first, extra in pairs:
        clock.call_later(first, outer, extra)
    clock.run()
    assert times == sorted(times)
