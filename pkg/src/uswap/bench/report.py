"""Plain-text tables, CSV and JSON for bench results."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterable

from .runner import PHASES, Report, SweepRow


def format_table(rows: list[dict[str, Any]], columns: list[str] | None = None) -> str:
    if not rows:
        return "(no rows)\n"
    columns = columns or list(rows[0])
    cells = [[str(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def csv_text(rows: Iterable[dict[str, Any]]) -> str:
    rows = list(rows)
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


def write_csv(path: str | Path, rows: Iterable[dict[str, Any]]) -> None:
    Path(path).write_text(csv_text(rows))


def report_json(report: Report) -> dict[str, Any]:
    out = asdict(report)
    out["survival"] = report.survival.as_rows() if report.survival is not None else None
    return out


def write_json(path: str | Path, payload: Any) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def run_summary(report: Report) -> str:
    row = report.row()
    head = format_table([{k: row[k] for k in ("workload", "backend", "mem_limit", "mode", "lanes",
                                               "ops", "tps", "avg_latency_ns", "fault_count")}])
    total = sum(report.breakdown.values())
    phases = [{"phase": p, "mean_ns": f"{report.breakdown[p]:.1f}",
               "share_pct": f"{100 * report.breakdown[p] / total:.2f}" if total else "0.00"}
              for p in PHASES]
    return head + "\nfault handling breakdown\n" + format_table(phases)


def sweep_rows(rows: list[SweepRow]) -> list[dict[str, Any]]:
    out = []
    for r in rows:
        row = {"concurrency": r.concurrency, "notify_us": f"{r.notify_ns / 1000:.3f}",
               "fault_us": f"{r.fault_ns / 1000:.3f}",
               "read_notify_pct": f"{100 * (r.phases['backend_read'] + r.phases['notify']) / r.fault_ns:.2f}",
               "max_shard_occupancy": r.max_shard_occupancy}
        for name, ns in sorted(r.reference.items()):
            row[f"{name}_ref_us"] = f"{ns / 1000:.3f}"
        out.append(row)
    return out
