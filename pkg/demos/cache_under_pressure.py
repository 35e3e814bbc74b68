"""A slab cache squeezed to a fraction of its footprint, then hit by a memory error."""

import numpy as np

from uswap.cache_app import NOT_FOUND, CacheApp
from uswap.system import System

cfg = {"app.meta_pages": 8, "app.arena_pages": 256, "app.request_ns": 2000,
       "scan.interval_us": 50, "swap.flush_threshold_pages": 16}
system = System(cfg, lanes=4, backend="ssd")
app = CacheApp(system.engine, system.runtime, system.workers, system.config,
               tolerance=system.tolerance)

rng = np.random.default_rng(11)
sizes = rng.integers(100, 3000, 400)
values = {k: bytes([k % 251]) * int(n) for k, n in enumerate(sizes)}
for k, v in values.items():
    app.load(k, v)

full = system.engine.resident
system.set_memory_limit(full // 4)
print(f"footprint {full} pages, limit {full // 4}")

bad = []


def client(keys):
    for k in keys:
        got = yield from app.get(int(k))
        if got is not NOT_FOUND and got != values[int(k)]:
            bad.append(int(k))


for lane in system.workers:
    system.runtime.spawn(lane, lambda: client(rng.integers(0, 400, 2000)), app=app)
system.run()

s = system.swap.stats
print(f"swap-outs {s.swap_outs}, swap-ins {s.swap_ins}, cache hits {s.cache_hits}, "
      f"prefetched {s.prefetch_mapped}")
print("wrong values:", bad)

# an uncorrectable error inside a slab page costs that size class, not the process
system.set_memory_limit(None)
shard = app.shard_for(7)
lane = system.workers[app.shards.index(shard)]
out = []


def warm():
    yield from app.get(7)


system.runtime.spawn(lane, warm, app=app)
system.run()
cls, loc = shard.lookup(7)
lost = len(cls)
# switch (500 ns) + request parsing (2000 ns) puts t+3000 inside the protected lookup
system.clock.call_later(3000, system.tolerance.raise_uce, app.space, cls.addr(loc.slot))


def probe():
    out.append((yield from app.get(7)))


system.runtime.spawn(lane, probe, app=app)
system.run()
print(f"after slab UCE: get(7) -> {out[0]!r}, class dropped {lost} items, "
      f"app terminated: {app.terminated}")
print("outcomes:", [o.name for o in system.tolerance.outcomes.values()])
