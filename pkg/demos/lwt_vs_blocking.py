"""Same trace, two fault-handling styles, at a few memory limits."""

from uswap.bench.report import format_table
from uswap.bench.runner import BenchConfig, run_bench

rows = []
for limit in (0.75, 0.5, 0.25):
    tps = {}
    for mode in ("lwt", "blocking"):
        r = run_bench(BenchConfig(mode=mode, mem_limit=limit, lanes=8, scale=1 / 256))
        tps[mode] = r.tps
        faults = r.fault_count
    rows.append({"mem_limit": limit, "faults": faults,
                 "lwt_Mtps": f"{tps['lwt'] / 1e6:.3f}",
                 "blocking_Mtps": f"{tps['blocking'] / 1e6:.3f}",
                 "gain_pct": f"{100 * (tps['lwt'] / tps['blocking'] - 1):.1f}"})

# blocking mode stalls the whole lane for every remote read
print(format_table(rows))
