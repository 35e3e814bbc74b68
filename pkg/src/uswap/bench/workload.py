"""YCSB-style operation streams."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import InvalidMix

GET, INSERT, UPDATE = 0, 1, 2
OP_NAMES = ("get", "insert", "update")

FULL_RECORDS = 10_485_760
FULL_OPS = 1_000_000
RECORD_BYTES = 1024


@dataclass(frozen=True)
class WorkloadSpec:
    name: str
    read_pct: int
    insert_pct: int
    update_pct: int
    ops: int = FULL_OPS
    records: int = FULL_RECORDS
    record_bytes: int = RECORD_BYTES
    key_dist: str = "zipfian"
    theta: float = 0.99
    seed: int = 1

    def __post_init__(self) -> None:
        pcts = (self.read_pct, self.insert_pct, self.update_pct)
        if any(p < 0 for p in pcts) or sum(pcts) != 100:
            raise InvalidMix(f"{self.name}: percentages {pcts} must be >= 0 and sum to 100")
        if self.ops < 1:
            raise InvalidMix(f"{self.name}: ops must be >= 1")
        if self.records < 1:
            raise InvalidMix(f"{self.name}: records must be >= 1")
        if self.key_dist not in ("uniform", "zipfian"):
            raise InvalidMix(f"{self.name}: unknown key distribution {self.key_dist!r}")

    def scaled(self, scale: float) -> "WorkloadSpec":
        return replace(self, ops=max(1, round(self.ops * scale)),
                       records=max(1, round(self.records * scale)))


PRESETS = {
    "readmost": WorkloadSpec("readmost", 90, 5, 5),
    "readwrite": WorkloadSpec("readwrite", 50, 25, 25),
    "writemost": WorkloadSpec("writemost", 10, 45, 45),
    # the mix exactly as printed for the write-heavy row of the source table
    "writemost-paper-literal": WorkloadSpec("writemost-paper-literal", 90, 5, 5),
}


def preset(name: str, **changes) -> WorkloadSpec:
    try:
        spec = PRESETS[name]
    except KeyError:
        raise InvalidMix(f"unknown workload {name!r}; choose from {', '.join(PRESETS)}") from None
    return replace(spec, **changes) if changes else spec


_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


def fnv64_scramble(values: np.ndarray) -> np.ndarray:
    """FNV-1a over the 8 little-endian bytes of each value (the YCSB scrambler)."""
    v = values.astype(np.uint64)
    h = np.full(v.shape, _FNV_OFFSET, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for i in range(8):
            octet = (v >> np.uint64(8 * i)) & np.uint64(0xFF)
            h = (h ^ octet) * _FNV_PRIME
    return h


# YCSB draws scrambled-zipfian ranks from a fixed 10^10-item space and hashes
# them onto the keyspace; zeta(10^10, 0.99) is its precomputed constant.
SCRAMBLE_ITEMS = 10_000_000_000
SCRAMBLE_ZETAN = 26.46902820178302


def zeta(n: int, theta: float, exact_upto: int = 1 << 22) -> float:
    """sum(k^-theta, k=1..n); past ``exact_upto`` terms the tail is integrated."""
    m = min(n, exact_upto)
    head = float(np.sum(np.arange(1, m + 1, dtype=np.float64) ** -theta))
    if n == m:
        return head
    a, b = m + 0.5, n + 0.5
    return head + (b ** (1 - theta) - a ** (1 - theta)) / (1 - theta)


class ZipfianSampler:
    """Ranks 0..n-1 with P(rank k) proportional to 1/(k+1)^theta (YCSB's algorithm)."""

    def __init__(self, n: int, theta: float = 0.99, zetan: float | None = None):
        self.n = n
        self.theta = theta
        self.zetan = zeta(n, theta) if zetan is None else zetan
        self.zeta2 = 1.0 + 0.5 ** theta
        self.alpha = 1.0 / (1.0 - theta)
        self.eta = (1.0 - (2.0 / n) ** (1.0 - theta)) / (1.0 - self.zeta2 / self.zetan) if n > 1 else 0.0

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.n == 1:
            return np.zeros(size, dtype=np.int64)
        u = rng.random(size)
        uz = u * self.zetan
        ranks = (self.n * (self.eta * u - self.eta + 1.0) ** self.alpha).astype(np.int64)
        ranks = np.where(uz < self.zeta2, 1, ranks)
        ranks = np.where(uz < 1.0, 0, ranks)
        return np.minimum(ranks, self.n - 1)


def scrambled_zipfian(rng: np.random.Generator, records: int, size: int, theta: float = 0.99) -> np.ndarray:
    """Zipf-popular keys spread over ``0..records-1`` by hashing (YCSB's default)."""
    zetan = SCRAMBLE_ZETAN if theta == 0.99 else zeta(SCRAMBLE_ITEMS, theta)
    ranks = ZipfianSampler(SCRAMBLE_ITEMS, theta, zetan).sample(rng, size)
    return (fnv64_scramble(ranks) % np.uint64(records)).astype(np.int64)


@dataclass
class OpStream:
    kinds: np.ndarray
    keys: np.ndarray
    records: int

    def __len__(self) -> int:
        return len(self.kinds)

    def counts(self) -> dict[str, int]:
        return {name: int(np.sum(self.kinds == i)) for i, name in enumerate(OP_NAMES)}


def generate_ops(spec: WorkloadSpec, seed: int | None = None, start_insert: int = 0) -> OpStream:
    """Deterministic op stream: kinds by the mix, keys by the distribution.

    Inserts add fresh keys ``records + start_insert, records + start_insert + 1, ...``.
    Reads and updates draw from the initially loaded records.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    probs = np.array([spec.read_pct, spec.insert_pct, spec.update_pct], dtype=np.float64) / 100.0
    kinds = rng.choice(3, size=spec.ops, p=probs).astype(np.int8)
    if spec.key_dist == "uniform":
        keys = rng.integers(0, spec.records, size=spec.ops, dtype=np.int64)
    else:
        keys = scrambled_zipfian(rng, spec.records, spec.ops, spec.theta)
    inserts = kinds == INSERT
    keys[inserts] = spec.records + start_insert + np.arange(int(inserts.sum()), dtype=np.int64)
    return OpStream(kinds, keys, spec.records)


def record_value(key: int, version: int = 0, size: int = RECORD_BYTES) -> bytes:
    """Deterministic record body for ``key`` at ``version``."""
    stamp = key.to_bytes(8, "little") + version.to_bytes(8, "little")
    return (stamp * (size // 16 + 1))[:size]
