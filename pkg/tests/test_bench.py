from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uswap.backend_store import _fnv1a_py
from uswap.bench import cli
from uswap.bench.report import csv_text, format_table
from uswap.bench.runner import BenchConfig, ConfigError
from uswap.bench.workload import (
    GET,
    INSERT,
    PRESETS,
    ZipfianSampler,
    fnv64_scramble,
    generate_ops,
    preset,
    record_value,
    zeta,
)
from uswap.errors import InvalidMix


@pytest.mark.parametrize("name,mix", [("readmost", (90, 5, 5)), ("readwrite", (50, 25, 25)),
                                      ("writemost", (10, 45, 45))])
def test_presets(name, mix):
    spec = PRESETS[name]
    assert (spec.read_pct, spec.insert_pct, spec.update_pct) == mix
    assert spec.records == 10_485_760 and spec.record_bytes == 1024


def test_invalid_mixes():
    with pytest.raises(InvalidMix):
        preset("readmost", read_pct=80)
    with pytest.raises(InvalidMix):
        preset("nosuch")
    with pytest.raises(InvalidMix):
        preset("readmost", key_dist="latest")
    with pytest.raises(InvalidMix):
        preset("readmost", ops=0)


def test_scaled_spec():
    spec = preset("readmost").scaled(1 / 64)
    assert spec.records == 163_840 and spec.ops == 15_625


@pytest.mark.parametrize("n,theta", [(1, 0.99), (10, 0.5), (1000, 0.99), (5_000_000, 0.99)])
def test_zeta_against_direct_sum(n, theta):
    exact = math.fsum(float(k) ** -theta for k in range(1, n + 1))
    assert zeta(n, theta) == pytest.approx(exact, rel=1e-9)


def test_zeta_matches_ycsb_constant():
    # YCSB's hard-coded zeta for its 10^10-item scrambled space
    assert zeta(10**10, 0.99) == pytest.approx(26.46902820178302, rel=1e-9)


def test_zipf_head_probabilities():
    n, theta = 1000, 0.99
    sampler = ZipfianSampler(n, theta)
    ranks = sampler.sample(np.random.default_rng(7), 400_000)
    assert ranks.min() >= 0 and ranks.max() < n
    freq = np.bincount(ranks, minlength=n) / len(ranks)
    assert freq[0] == pytest.approx(1 / sampler.zetan, abs=0.003)
    assert freq[1] == pytest.approx(2 ** -theta / sampler.zetan, abs=0.003)
    assert freq[:10].sum() > freq[10:20].sum() > freq[100:110].sum()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 2**63 - 1), min_size=1, max_size=20))
def test_scramble_is_fnv_of_le_bytes(values):
    got = fnv64_scramble(np.array(values, dtype=np.uint64))
    assert [int(x) for x in got] == [_fnv1a_py(v.to_bytes(8, "little")) for v in values]


def test_op_stream_is_deterministic_and_inserts_fresh_keys():
    spec = preset("readwrite", ops=5000, records=1000)
    a, b = generate_ops(spec), generate_ops(spec)
    assert np.array_equal(a.kinds, b.kinds) and np.array_equal(a.keys, b.keys)
    assert not np.array_equal(a.keys, generate_ops(spec, seed=99).keys)
    inserts = a.keys[a.kinds == INSERT]
    assert np.array_equal(inserts, 1000 + np.arange(len(inserts)))
    assert a.keys[a.kinds == GET].max() < 1000
    counts = a.counts()
    assert sum(counts.values()) == 5000 and abs(counts["get"] - 2500) < 200


def test_record_value():
    v = record_value(3, 2)
    assert len(v) == 1024 and v[:8] == (3).to_bytes(8, "little")
    assert record_value(3, 2, 40) == v[:40]


def test_bench_config_validation():
    with pytest.raises(ConfigError) as info:
        BenchConfig(backend="tape", mem_limit=1.5, mode="x", lanes=0, overrides={"no.such": 1}).validate()
    msg = str(info.value)
    for part in ("backend", "mem-limit", "mode", "lanes", "no.such"):
        assert part in msg


def test_table_and_csv_formatting():
    rows = [{"a": 1, "bb": "x"}, {"a": 22, "bb": "yy"}]
    assert format_table(rows).splitlines()[0] == " a  bb"
    assert csv_text(rows) == "a,bb\n1,x\n22,yy\n"
    assert format_table([]) == "(no rows)\n"


def test_cli_rejects_bad_values(capsys):
    assert cli.main(["run", "--backend", "tape"]) == 2
    assert "backend must be remote or ssd" in capsys.readouterr().err
    assert cli.main(["errors", "--profile", "lucky"]) == 2
    assert cli.main(["notify-sweep", "--set", "bogus.key=1"]) == 2
    assert cli.main(["run", "--set", "noequals"]) == 2
    assert cli.main(["run", "--scale", "1/0"]) == 2


def test_cli_config_file_and_flag_precedence(tmp_path):
    conf = tmp_path / "bench.conf"
    conf.write_text("# comment\nworkload = writemost\nlanes = 3\nmem_limit = 0.75\nswap.map_ns = 1500\n")
    args = cli.build_parser().parse_args(["run", "--config", str(conf), "--lanes", "5"])
    values, overrides = cli.resolve(args)
    bc = cli.bench_config(values, overrides)
    assert (bc.workload, bc.lanes, bc.mem_limit) == ("writemost", 5, 0.75)
    assert bc.system_config()["swap.map_ns"] == 1500
    bad = tmp_path / "bad.conf"
    bad.write_text("colour = blue\n")
    assert cli.main(["run", "--config", str(bad)]) == 2


def test_cli_notify_sweep_writes_csv(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    assert cli.main(["notify-sweep", "--levels", "1,16", "--csv", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("concurrency,notify_us,fault_us") and len(lines) == 3
    assert "concurrency" in capsys.readouterr().out


def test_cli_run_small(tmp_path):
    out, js = tmp_path / "run.csv", tmp_path / "run.json"
    argv = ["run", "--lanes", "2", "--records", "400", "--ops", "600", "--seed", "4",
            "--csv", str(out), "--json", str(js)]
    assert cli.main(argv) == 0
    first = out.read_text()
    assert cli.main(argv) == 0
    assert out.read_text() == first
    payload = json.loads(js.read_text())
    assert payload["ops"] == 600 and payload["fault_count"] > 0
