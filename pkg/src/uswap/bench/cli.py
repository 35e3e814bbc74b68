"""``bench`` command line: run, notify-sweep, errors."""

from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path
from typing import Any

from ..config import DEFAULTS, parse_config_text
from ..fault_tolerance import ErrorKind
from .report import csv_text, format_table, report_json, run_summary, sweep_rows, write_json
from .runner import ERROR_PROFILES, BenchConfig, ConfigError, run_bench, run_error_campaign, run_notify_sweep

BUILTIN = {
    "workload": "readmost", "backend": "remote", "mem-limit": "0.5", "mode": "lwt", "lanes": "32",
    "seed": "1", "scale": "1/64", "ops": None, "records": None, "key-dist": "zipfian",
    "lwts-per-lane": "10", "levels": "1,16,32,64,128", "swapin": "0", "uce": "0",
    "swapin-rate": "0.5", "uce-interval-ns": "2000", "profile": "default", "protect": None, "csv": None, "json": None,
}


def _fraction(text: str) -> float:
    return float(Fraction(text.strip()))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a dotted system config key")
    p.add_argument("--csv", help="write machine-readable rows here")
    p.add_argument("--json", help="write the full report here")


def _add_workload(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workload", help="readmost | readwrite | writemost | writemost-paper-literal")
    p.add_argument("--backend", help="remote | ssd")
    p.add_argument("--mem-limit", help="resident fraction of the loaded dataset, e.g. 0.5")
    p.add_argument("--mode", help="lwt | blocking")
    p.add_argument("--lanes", help="worker lanes")
    p.add_argument("--seed")
    p.add_argument("--scale", help="fraction of the full dataset and op count, e.g. 1/64")
    p.add_argument("--ops", help="override the op count")
    p.add_argument("--records", help="override the record count")
    p.add_argument("--key-dist", help="zipfian | uniform")
    p.add_argument("--lwts-per-lane")
    p.add_argument("--protect", help="get | all | none")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description="swapping benchmark driver")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="load, limit memory, replay a workload")
    _add_workload(run)
    _add_common(run)
    sweep = sub.add_parser("notify-sweep", help="notification latency by concurrent faulters")
    sweep.add_argument("--levels", help="comma-separated concurrency levels")
    _add_common(sweep)
    errs = sub.add_parser("errors", help="paging-error injection campaign")
    errs.add_argument("--swapin", help="swap-in errors to inject")
    errs.add_argument("--uce", help="memory UCEs to inject")
    errs.add_argument("--swapin-rate", help="probability a demand swap-in read fails")
    errs.add_argument("--uce-interval-ns", help="mean virtual time between UCEs")
    errs.add_argument("--profile", help="default | calibrated (fitted metadata share and request time)")
    _add_workload(errs)
    _add_common(errs)
    return parser


def resolve(args: argparse.Namespace) -> tuple[dict[str, Any], dict[str, str]]:
    """Merge built-in defaults, the config file and flags (flags win)."""
    values = dict(BUILTIN)
    overrides: dict[str, str] = {}
    if args.config:
        for key, value in parse_config_text(Path(args.config).read_text()).items():
            if key in DEFAULTS:
                overrides[key] = value
                continue
            flag = key.replace("_", "-")
            if flag not in values:
                raise ConfigError(f"{args.config}: unknown key {key!r}")
            values[flag] = value
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for flag in values:
        given = getattr(args, flag.replace("-", "_"), None)
        if given is not None:
            values[flag] = given
    if values["protect"] is not None:
        overrides["app.protect"] = values["protect"]
    return values, overrides


def bench_config(values: dict[str, Any], overrides: dict[str, str]) -> BenchConfig:
    try:
        bc = BenchConfig(
            workload=values["workload"], backend=values["backend"],
            mem_limit=_fraction(values["mem-limit"]), mode=values["mode"],
            lanes=int(values["lanes"]), seed=int(values["seed"]), scale=_fraction(values["scale"]),
            ops=int(values["ops"]) if values["ops"] is not None else None,
            records=int(values["records"]) if values["records"] is not None else None,
            key_dist=values["key-dist"], lwts_per_lane=int(values["lwts-per-lane"]),
            overrides=dict(overrides))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(str(exc)) from exc
    bc.validate()
    return bc


def _emit(rows: list[dict[str, Any]], values: dict[str, Any], payload: Any, text: str) -> None:
    sys.stdout.write(text)
    if values["csv"]:
        Path(values["csv"]).write_text(csv_text(rows))
    if values["json"]:
        write_json(values["json"], payload)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        values, overrides = resolve(args)
        if args.command == "run":
            bc = bench_config(values, overrides)
            report = run_bench(bc)
            _emit([report.row()], values, report_json(report), run_summary(report))
        elif args.command == "notify-sweep":
            levels = [int(x) for x in str(values["levels"]).split(",") if x.strip()]
            unknown = sorted(k for k in overrides if k not in DEFAULTS)
            if unknown:
                raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
            rows = sweep_rows(run_notify_sweep(levels, overrides))
            _emit(rows, values, rows, format_table(rows))
        else:
            if values["profile"] not in ERROR_PROFILES:
                raise ConfigError(f"unknown profile {values['profile']!r}; choose from "
                                  + ", ".join(ERROR_PROFILES))
            overrides = {**ERROR_PROFILES[values["profile"]], **overrides}
            bc = bench_config(values, overrides)
            result = run_error_campaign(
                bc, int(values["swapin"]), int(values["uce"]),
                swapin_rate=float(values["swapin-rate"]),
                uce_interval_ns=int(values["uce-interval-ns"]))
            rows = result.table.as_rows()
            for row in rows:
                row["meta_share_pct"] = round(100 * result.meta_fraction[ErrorKind(row["kind"])], 2)
            _emit(rows, values, {"survival": rows, "runs": {k.value: report_json(r)
                                                            for k, r in result.reports.items()}},
                  format_table(rows))
    except ConfigError as exc:
        print(f"bench: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
