from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uswap.cache_app import ABORTED, CLASS_SIZES, NOT_FOUND, CacheApp, class_for, key_hash
from uswap.fault_tolerance import Outcome
from uswap.system import System

SMALL = {"lwt.switch_ns": 0, "app.meta_pages": 4, "app.arena_pages": 64,
         "scan.low_mem_threshold_pages": 8, "scan.interval_us": 20,
         "swap.flush_threshold_pages": 8, "swap.flush_interval_us": 50}


def make_app(lanes=2, **cfg):
    system = System({**SMALL, **cfg}, lanes=lanes)
    app = CacheApp(system.engine, system.runtime, system.workers, system.config,
                   tolerance=system.tolerance)
    return system, app


def run_script(system, app, script):
    """Run (op, key, value) steps in order on one LWT; returns get results."""
    results = []

    def driver():
        for op, key, value in script:
            if op == "get":
                results.append((yield from app.get(key)))
            else:
                results.append((yield from app.put(key, value)))

    system.runtime.spawn(system.workers[0], driver, app=app)
    system.run()
    return results


def value_for(key: int, version: int, size: int) -> bytes:
    return (key.to_bytes(4, "little") + version.to_bytes(4, "little")) * (size // 8) + b"#" * (size % 8)


def test_class_for_boundaries():
    assert class_for(1) == 0 and class_for(64) == 0 and class_for(65) == 1
    assert class_for(CLASS_SIZES[-1]) == len(CLASS_SIZES) - 1
    with pytest.raises(ValueError):
        class_for(CLASS_SIZES[-1] + 1)


def test_key_hash_accepts_common_key_types():
    assert key_hash("k") == key_hash(b"k")
    assert key_hash(1) != key_hash(2)


def test_bad_protect_setting():
    with pytest.raises(ValueError):
        make_app(**{"app.protect": "some"})


def test_put_get_round_trip_across_pages():
    system, app = make_app()
    big = bytes(range(256)) * 24  # 6 KiB: spans two pages in the 8 KiB class
    script = [("put", "a", b"x" * 10), ("put", "b", big), ("get", "a", None), ("get", "b", None),
              ("get", "zz", None), ("put", "a", b"y" * 300), ("get", "a", None)]
    out = run_script(system, app, script)
    assert out[2] == b"x" * 10 and out[3] == big and out[4] is NOT_FOUND
    assert out[6] == b"y" * 300
    assert len(app) == 2 and app.audit() == []
    # moving to a larger class leaves no stale copy behind
    shard = app.shard_for("a")
    assert [c.class_id for c in shard.classes.values() if "a" in c.items] == [class_for(300)]


def test_region_kinds():
    _, app = make_app()
    shard = app.shards[1]
    assert app.region_kind(shard.bucket_addr(12345)) == "meta"
    slab = shard.slab(3)
    assert app.region_kind(slab.addr(0)) == "slab"
    assert shard.class_at(slab.addr(5)) is slab
    assert app.shard_at(0) is None


def test_slab_uce_resets_class_and_get_misses():
    system, app = make_app(lanes=1)
    for k in range(20):
        app.load(k, value_for(k, 0, 100))
    cls = app.shard_for(5).slab(class_for(100))
    loc = cls.items[5]
    resets = []
    app.on_reset = lambda shard, c, prev: resets.append((c.class_id, len(prev[0])))
    system.clock.call_later(100, system.tolerance.raise_uce, app.space, cls.addr(loc.slot))
    out = run_script(system, app, [("get", 5, None), ("get", 6, None), ("put", 6, b"new"), ("get", 6, None)])
    assert out == [NOT_FOUND, NOT_FOUND, True, b"new"]
    assert resets == [(class_for(100), 20)] and app.recoveries == 1
    assert list(system.tolerance.outcomes.values()) == [Outcome.SURVIVED]


def test_metadata_uce_takes_app_down():
    system, app = make_app(lanes=1)
    app.load(1, b"v")
    shard = app.shard_for(1)
    system.clock.call_later(100, system.tolerance.raise_uce, app.space, shard.bucket_addr(key_hash(1)))
    out = run_script(system, app, [("get", 1, None)])
    assert out == [ABORTED] and app.terminated and app.escalations == 1
    assert list(system.tolerance.outcomes.values()) == [Outcome.TERMINATED]


def test_unprotected_put_error_terminates():
    system, app = make_app(lanes=1)
    app.load(1, b"v" * 100)
    cls = app.shard_for(1).slab(class_for(100))
    system.clock.call_later(100, system.tolerance.raise_uce, app.space, cls.addr(0))
    run_script(system, app, [("put", 1, b"w" * 100)])
    assert app.terminated


def test_reset_and_restore():
    _, app = make_app(lanes=1)
    for k in range(5):
        app.load(k, b"z")
    cls = app.shard_for(0).slab(0)
    state = cls.reset()
    assert len(cls) == 0 and cls.resets == 1
    cls.restore(state)
    assert len(cls) == 5 and app.audit() == []


def test_lru_eviction_when_class_is_full():
    _, app = make_app(lanes=1, **{"app.arena_pages": 1})
    cls = app.shards[0].slab(class_for(2048))
    assert cls.capacity == 2
    for k in range(3):
        app.load(k, b"q" * 2000)
    assert list(cls.items) == [1, 2] and cls.evictions == 1


ops = st.lists(st.tuples(st.sampled_from(["get", "put"]), st.integers(0, 30), st.integers(1, 3000)),
               min_size=1, max_size=80)


@settings(max_examples=25, deadline=None)
@given(ops, st.sampled_from(["ssd", "remote"]))
def test_matches_dict_under_memory_pressure(script_spec, backend):
    system, app = make_app(backend=backend)
    model: dict[int, bytes] = {}
    for k in range(0, 31, 2):
        app.load(k, value_for(k, 0, 200))
        model[k] = value_for(k, 0, 200)
    system.set_memory_limit(max(8, system.engine.resident // 2))
    script, expected = [], []
    for version, (op, key, size) in enumerate(script_spec, start=1):
        if op == "put":
            value = value_for(key, version, size)
            script.append(("put", key, value))
            model[key] = value
            expected.append(True)
        else:
            script.append(("get", key, None))
            expected.append(model.get(key, NOT_FOUND))
    assert run_script(system, app, script) == expected
    assert app.audit() == [] and system.swap.audit() == []
