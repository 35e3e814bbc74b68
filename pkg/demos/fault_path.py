"""Walk one page through swap-out and back, then sweep notification concurrency."""

from uswap.bench.report import format_table, sweep_rows
from uswap.bench.runner import run_notify_sweep
from uswap.fault_engine import PAGE_SIZE
from uswap.lwt import Access
from uswap.system import System

system = System({"swap.prefetch": False}, lanes=2)
space = system.engine.create_space(1)
space.add_region(0, 16)
system.engine.page_map(space, 3)
system.engine.poke(space, 3 * PAGE_SIZE, b"hello, far memory")

# push the page all the way to the remote store
system.swap.swap_out([(1, 3)])
system.swap.flush_swap_cache()
print("after swap-out:", system.swap.location_of((1, 3)))

seen = []


def reader():
    seen.append((yield Access(space, 3 * PAGE_SIZE, 17)))


system.runtime.spawn(system.workers[0], reader)
system.run()
print("read back:", seen[0], "| now", system.swap.location_of((1, 3)))

(rec,) = [r for r in system.engine.records if r.t_resolved]
for phase, ns in rec.phases().items():
    print(f"  {phase:<13}{ns / 1000:6.2f} us")
print(f"  {'total':<13}{(rec.t_resolved - rec.t_fault) / 1000:6.2f} us")

# more faulting lanes -> slower notification, most of the time still goes to the read
rows = run_notify_sweep([1, 16, 32, 64, 128])
print()
print(format_table(sweep_rows(rows)))
