"""End-to-end acceptance checks, one test per numbered criterion.

Each test asserts its own wall-clock budget and leaves a one-line summary
that the conftest prints as a PASS/FAIL table after the run.
"""

from __future__ import annotations

import csv
import io
import math
import struct
import time
from collections import deque

import numpy as np
import pytest

from uswap.backend_store import PAGE_SIZE, BackendStore, KvIndex
from uswap.bench import cli
from uswap.bench.runner import ERROR_PROFILES, BenchConfig, run_bench, run_error_campaign, run_notify_sweep
from uswap.coldscan import ColdScanner, replay_classify
from uswap.config import Config
from uswap.errors import KeyNotFound
from uswap.fault_engine import EBPF_PROFILE, FaultContextMapSet, FaultEngine
from uswap.fault_tolerance import ErrorKind, binomial_band
from uswap.lwt import IDLE, Access, Lwt, LwtClass, LwtState, Runtime
from uswap.simclock import SimClock
from uswap.system import System

CLASSES = (LwtClass.SWAP_IN, LwtClass.FAULTING_RESUMED, LwtClass.NORMAL)


def within(budget_s: float, started: float) -> float:
    elapsed = time.perf_counter() - started
    assert elapsed < budget_s, f"took {elapsed:.1f} s, budget {budget_s} s"
    return elapsed


# --- 1 -----------------------------------------------------------------------


@pytest.mark.criterion(1, "dispatch order swap-in > faulting > normal over 1e6 steps")
def test_scheduler_priority_order(detail):
    started = time.perf_counter()
    steps, nlanes, per_lane = 1_000_000, 4, 48
    rt = Runtime(SimClock(), Config({"lwt.switch_ns": 0}))
    # the harness drives schedule_next itself; wake() must not dispatch on its own
    rt._kick = lambda lane: None
    lanes = [rt.add_lane() for _ in range(nlanes)]
    blocked: list[list[int]] = []
    models: list[dict[LwtClass, deque]] = []
    lid = 0
    for lane in lanes:
        pool = []
        for _ in range(per_lane):
            lwt = Lwt(lid, lane, LwtClass.NORMAL, None, 0, f"lwt{lid}", None)
            lwt.state = LwtState.BLOCKED
            rt.lwts[lid] = lwt
            pool.append(lid)
            lid += 1
        blocked.append(pool)
        models.append({c: deque() for c in CLASSES})

    rng = np.random.default_rng(20240611)
    wakes = rng.integers(0, 4, steps).tolist()
    picks = rng.random((steps, 3)).tolist()
    klass = rng.choice(3, size=(steps, 3), p=[0.5, 0.35, 0.15]).tolist()
    requeue = (rng.random(steps) < 0.35).tolist()

    violations = dispatches = all_active = 0
    for step in range(steps):
        li = step % nlanes
        lane, pool, model = lanes[li], blocked[li], models[li]
        for j in range(wakes[step]):
            if not pool:
                break
            i = int(picks[step][j] * len(pool))
            who = pool[i]
            pool[i] = pool[-1]
            pool.pop()
            c = CLASSES[klass[step][j]]
            rt.wake(who, c)
            model[c].append(who)
        cur = lane.current
        if cur is not None:
            if requeue[step]:
                rt.yield_now(cur)
                model[cur.klass].append(cur.id)
            else:
                rt.block_current(cur, "io")
                pool.append(cur.id)
        expected = IDLE
        active = 0
        for c in CLASSES:
            if model[c]:
                active += 1
                if expected is IDLE:
                    expected = model[c].popleft()
        all_active += active == 3
        got = rt.schedule_next(lane)
        dispatches += got is not IDLE
        violations += got != expected

    elapsed = within(10, started)
    share = all_active / steps
    detail(f"{dispatches} dispatches, {violations} violations, all three queues busy at {share:.0%} of steps")
    assert dispatches >= 1_000_000 * 0.95 and steps >= 1_000_000
    assert share > 0.25
    assert violations == 0
    assert elapsed < 10


# --- 2 -----------------------------------------------------------------------


@pytest.mark.criterion(2, "notify-sweep reproduces the measured eBPF notification row exactly")
def test_notify_sweep_exact(tmp_path, capsys, detail):
    started = time.perf_counter()
    out = tmp_path / "sweep.csv"
    assert cli.main(["notify-sweep", "--levels", "1,16,32,64,128", "--csv", str(out)]) == 0
    capsys.readouterr()
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    got = {int(r["concurrency"]): r["notify_us"] for r in rows}
    want = {level: f"{ns / 1000:.3f}" for level, ns in EBPF_PROFILE}
    within(5, started)
    detail("notify_us " + ", ".join(f"{k}:{v}" for k, v in got.items()))
    assert got == want == {1: "1.600", 16: "1.700", 32: "2.000", 64: "2.400", 128: "4.000"}


# --- 3 -----------------------------------------------------------------------


@pytest.mark.criterion(3, "fault-context shard occupancy is ceil(L/32) for L in 1..256")
def test_shard_balance(detail):
    started = time.perf_counter()
    bad = []
    at_128 = None
    for lanes in range(1, 257):
        shards = FaultContextMapSet(32)
        worst = max(shards.insert(lane, object()) for lane in range(lanes))
        if worst != math.ceil(lanes / 32):
            bad.append((lanes, worst))
        if lanes == 128:
            at_128 = worst
    within(1, started)
    detail(f"L=128 -> {at_128} contexts per shard, {len(bad)} mismatches")
    assert bad == [] and at_128 == 4


# --- 4 -----------------------------------------------------------------------


@pytest.mark.criterion(4, "mean fault latency in [10, 13.5] us (+-10%), read+notify >= 60%")
def test_fault_latency_envelope(detail):
    started = time.perf_counter()
    assert Config()["store.read_ns.remote"] == 5000
    rows = run_notify_sweep([1, 16, 32, 64])
    lo, hi = 10_000 * 0.9, 13_500 * 1.1
    shares = {r.concurrency: (r.phases["backend_read"] + r.phases["notify"]) / r.fault_ns for r in rows}
    within(30, started)
    detail(", ".join(f"c={r.concurrency}: {r.fault_ns / 1000:.1f} us, {100 * shares[r.concurrency]:.0f}%"
                     for r in rows))
    for r in rows:
        assert lo <= r.fault_ns <= hi, (r.concurrency, r.fault_ns)
        assert abs(sum(r.phases.values()) - r.fault_ns) < 1e-6
        assert shares[r.concurrency] >= 0.60


# --- 5 -----------------------------------------------------------------------


@pytest.mark.criterion(5, "LWT swap-in beats the blocking baseline by >= 25% TPS")
def test_async_beats_blocking(detail):
    started = time.perf_counter()
    base = dict(workload="readmost", backend="remote", mem_limit=0.5, lwts_per_lane=10,
                scale=1 / 64, seed=1)
    lwt = run_bench(BenchConfig(mode="lwt", **base))
    blocking = run_bench(BenchConfig(mode="blocking", **base))
    gain = lwt.tps / blocking.tps - 1
    within(120, started)
    detail(f"lwt {lwt.tps / 1e6:.3f}M vs blocking {blocking.tps / 1e6:.3f}M TPS, +{100 * gain:.1f}%")
    assert lwt.ops == blocking.ops and lwt.fault_count > 1000 and blocking.fault_count > 1000
    assert gain >= 0.25


# --- 6 -----------------------------------------------------------------------

ROUND_TRIP = {"scan.low_mem_threshold_pages": 16, "scan.interval_us": 20,
              "swap.flush_threshold_pages": 16, "swap.flush_interval_us": 50}


def _round_trip(backend: str, target: int, seed: int) -> tuple[int, list, list, int]:
    """Random reads and writes on disjoint page sets until ``target`` pages came back."""
    system = System(ROUND_TRIP, lanes=4, backend=backend)
    pages, limit, per_lane = 1024, 256, 4
    space = system.engine.create_space(1)
    space.add_region(0, pages)
    system.set_memory_limit(limit)
    model = [bytearray(PAGE_SIZE) for _ in range(pages)]
    stats = system.swap.stats
    mismatches: list = []
    workers = len(system.workers) * per_lane

    def cycles() -> int:
        return stats.swap_ins + stats.cache_hits + stats.prefetch_mapped

    def worker(w: int):
        # each worker owns its pages, so the model never races
        mine = np.arange(w, pages, workers)
        rng = np.random.default_rng(seed * 1000 + w)
        n = 0
        while cycles() < target:
            for vpn in rng.choice(mine, 64).tolist():
                off = (vpn * 97 % 255) * 16
                addr = vpn * PAGE_SIZE + off
                got = yield Access(space, addr, 16)
                if got != bytes(model[vpn][off:off + 16]):
                    mismatches.append((vpn, off))
                n += 1
                stamp = struct.pack("<QQ", vpn, (w << 40) | n)
                yield Access(space, addr, 16, stamp)
                model[vpn][off:off + 16] = stamp

    w = 0
    for lane in system.workers:
        for _ in range(per_lane):
            system.runtime.spawn(lane, lambda w=w: worker(w))
            w += 1
    audit = system.swap.start_audit(200_000)
    system.run()
    # every byte of every page, wherever it ended up
    for vpn in range(pages):
        key = (1, vpn)
        where = system.swap.location_of(key)
        if where == "present":
            data = system.engine.peek(space, vpn * PAGE_SIZE, PAGE_SIZE)
        elif where == "cache":
            data = system.swap.cache.get(key).data
        elif where == "backend":
            data = system.backend.get(key)
        else:
            data = bytes(PAGE_SIZE) if where == "unpopulated" else None
        if data != bytes(model[vpn]):
            mismatches.append((vpn, where))
    audit.extend(system.swap.audit())
    system.close()
    return cycles(), mismatches, audit, stats.swap_outs


@pytest.mark.criterion(6, "1e5 swap-out/fault/swap-in cycles: no byte mismatch, exclusive residence")
def test_round_trip_integrity(detail):
    started = time.perf_counter()
    results = {backend: _round_trip(backend, 50_000, seed) for seed, backend in enumerate(("remote", "ssd"))}
    within(60, started)
    total = sum(r[0] for r in results.values())
    detail(", ".join(f"{b}: {r[0]} cycles, {len(r[1])} mismatches, {len(r[2])} audit hits"
                     for b, r in results.items()))
    assert total >= 100_000
    for cycles, mismatches, audit, swap_outs in results.values():
        assert mismatches == [] and audit == []
        assert swap_outs >= cycles * 0.9


# --- 7 -----------------------------------------------------------------------


def _oracle_ops(backend: str, n_ops: int, seed: int) -> tuple[int, int, int]:
    # 2400 keys over 256 primary buckets: most keys land in the conflict table
    index = KvIndex(buckets=256, conflict_buckets=32)
    store = BackendStore(SimClock(), Config(), backend, index=index)
    rng = np.random.default_rng(seed)
    bodies = [rng.bytes(PAGE_SIZE) for _ in range(64)]
    kinds = rng.choice(3, n_ops, p=[0.4, 0.4, 0.2]).tolist()
    apps = rng.integers(1, 4, n_ops).tolist()
    vpns = rng.integers(0, 800, n_ops).tolist()
    vals = rng.integers(0, 64, n_ops).tolist()
    model: dict[tuple[int, int], int] = {}
    mismatches = 0
    compactions = 0
    max_conflict = 0
    for i in range(n_ops):
        key = (apps[i], vpns[i])
        kind = kinds[i]
        if kind == 0:
            store.put(key, bodies[vals[i]])
            model[key] = vals[i]
        elif kind == 1:
            try:
                mismatches += store.get(key) != bodies[model[key]]
            except KeyNotFound:
                mismatches += key in model
            except KeyError:
                mismatches += 1
        else:
            try:
                store.delete(key)
                mismatches += model.pop(key, None) is None
            except KeyNotFound:
                mismatches += key in model
        if i == n_ops // 2 and backend == "ssd":
            store.compact_log()
            compactions += 1
        if i % 10_000 == 0:
            max_conflict = max(max_conflict, sum(len(c) for c in index.conflict.values()))
    mismatches += sorted(k for k, _ in index.items()) != sorted(model)
    mismatches += sum(store.get(k) != bodies[v] for k, v in model.items())
    return mismatches, compactions, max_conflict


@pytest.mark.criterion(7, "1e5 random put/get/delete ops match a plain-map oracle")
def test_backend_oracle_equivalence(detail):
    started = time.perf_counter()
    ssd = _oracle_ops("ssd", 100_000, 7)
    remote = _oracle_ops("remote", 100_000, 8)
    within(30, started)
    detail(f"ssd: {ssd[0]} mismatches, {ssd[1]} compaction, peak {ssd[2]} chained keys; "
           f"remote: {remote[0]} mismatches")
    assert ssd[0] == 0 and remote[0] == 0
    assert ssd[1] == 1 and ssd[2] > 500


# --- 8 -----------------------------------------------------------------------


@pytest.mark.criterion(8, "classify() equals the replay oracle on 20 seeds x 1000 pages x 10 epochs")
def test_coldscan_oracle(detail):
    started = time.perf_counter()
    pages, epochs = 1000, 10
    mismatched = []
    hot_total = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        clock = SimClock()
        cfg = Config()
        engine = FaultEngine(clock, Runtime(clock, cfg), cfg)
        space = engine.create_space(1)
        space.add_region(0, pages)
        for vpn in range(pages):
            engine.page_map(space, vpn)
        scanner = ColdScanner(engine, cfg)
        p = 0.2 + 0.6 * rng.random()
        trace = []
        for _ in range(epochs):
            touched = set(np.flatnonzero(rng.random(pages) < p).tolist())
            for vpn in touched:
                space.table[vpn].accessed = True
            scanner.scan_once(space)
            trace.append(touched)
        got = scanner.classify(space)
        want = replay_classify(trace, set(range(pages)))
        hot_total += len(got["hot"])
        if got != want:
            mismatched.append(seed)
    within(10, started)
    detail(f"{len(mismatched)} mismatching seeds, {hot_total} hot pages total")
    assert mismatched == []


# --- 9 -----------------------------------------------------------------------


@pytest.mark.criterion(9, "swap-in survival matches the coverage oracle; calibrated 57%/26% within 10 pp")
def test_error_survival(detail):
    started = time.perf_counter()
    default = run_error_campaign(BenchConfig(), 5000, 0)
    calibrated = run_error_campaign(BenchConfig(overrides=dict(ERROR_PROFILES["calibrated"])), 10_000, 15_000)
    within(120, started)
    notes = []
    checks = []
    for name, result in (("default", default), ("calibrated", calibrated)):
        row = result.table.rows[ErrorKind.SWAP_IN]
        expected = result.table.expected[ErrorKind.SWAP_IN]
        lo, hi = binomial_band(expected, row.injected)
        observed = row.survived / row.injected
        checks.append(lo <= observed <= hi)
        notes.append(f"{name}: {100 * observed:.2f}% vs oracle {100 * expected:.2f}% "
                     f"(band {100 * lo:.2f}-{100 * hi:.2f}), meta share "
                     f"{100 * result.meta_fraction[ErrorKind.SWAP_IN]:.1f}%")
    swapin = calibrated.table.rows[ErrorKind.SWAP_IN].survived_pct
    uce = calibrated.table.rows[ErrorKind.MEMORY_UCE].survived_pct
    notes.append(f"calibrated swap-in {swapin:.2f}%, UCE {uce:.2f}%")
    detail("; ".join(notes))
    assert default.table.rows[ErrorKind.SWAP_IN].injected >= 5000
    assert all(checks)
    assert abs(swapin - 57) <= 10
    assert abs(uce - 26) <= 10


# --- 10 ----------------------------------------------------------------------


def _cli_csv(tmp_path, name: str, argv: list[str], capsys) -> str:
    out = tmp_path / f"{name}.csv"
    assert cli.main(argv + ["--csv", str(out)]) == 0
    capsys.readouterr()
    return out.read_text()


@pytest.mark.criterion(10, "same seed, byte-identical CSV reports")
def test_determinism(tmp_path, capsys, detail):
    runs = {
        "run": ["run", "--workload", "readmost", "--backend", "remote", "--mem-limit", "0.5",
                "--mode", "lwt", "--seed", "3"],
        "run-ssd-blocking": ["run", "--workload", "writemost", "--backend", "ssd", "--mem-limit", "0.75",
                             "--mode", "blocking", "--seed", "5", "--lanes", "8"],
        "notify-sweep": ["notify-sweep"],
        "errors": ["errors", "--swapin", "500", "--uce", "500", "--seed", "9", "--lanes", "8"],
    }
    same = {}
    for name, argv in runs.items():
        first = _cli_csv(tmp_path, name + "-a", argv, capsys)
        second = _cli_csv(tmp_path, name + "-b", argv, capsys)
        same[name] = first == second and len(first.splitlines()) >= 2
    detail(", ".join(f"{k}: {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert all(same.values())
