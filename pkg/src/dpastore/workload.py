"""Datasets, key-popularity sampling, YCSB-style workloads and metrics."""

from __future__ import annotations

import csv
import io
import json
import math
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

from .client import Call, Client, ClientConfig, Result
from .wire import Op, Status

U64_MAX = (1 << 64) - 1
DATASET_KINDS = ("sparse", "dense4x", "clustered", "lognormal")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    keys: np.ndarray  # uint64, strictly increasing
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.keys)

    def key_list(self) -> list[int]:
        return [int(k) for k in self.keys]


def _distinct(draw, n: int) -> np.ndarray:
    out = np.unique(draw(n))
    while len(out) < n:
        out = np.unique(np.concatenate([out, draw(n - len(out) + 16)]))
    return out


def generate(kind: str, n: int, seed: int = 0) -> Dataset:
    """Synthetic dataset of ``n`` distinct sorted keys.

    ``sparse`` samples the whole 64-bit range; ``dense4x`` samples ``n`` of
    ``4n`` consecutive keys. ``clustered`` and ``lognormal`` are skewed
    distributions used to stress the linear models.
    """
    if n < 1:
        raise DatasetError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "sparse":
        keys = _distinct(lambda m: rng.integers(0, U64_MAX, size=m, dtype=np.uint64, endpoint=True), n)
        if len(keys) > n:
            keys = np.sort(rng.choice(keys, n, replace=False))
    elif kind == "dense4x":
        base = int(rng.integers(0, 1 << 62))
        keys = np.sort(rng.choice(4 * n, n, replace=False).astype(np.uint64)) + np.uint64(base)
    elif kind == "clustered":
        centers = rng.integers(1 << 40, 1 << 62, size=max(1, n // 5000), dtype=np.uint64)

        def draw(m):
            c = rng.choice(centers, m)
            off = rng.normal(0, 2.0**24, m).astype(np.int64)
            return (c.astype(np.int64) + off).astype(np.uint64)

        keys = _distinct(draw, n)
        if len(keys) > n:
            keys = np.sort(rng.choice(keys, n, replace=False))
    elif kind == "lognormal":
        def draw(m):
            return np.minimum(rng.lognormal(0.0, 2.0, m) * 1e9, 2.0**63).astype(np.uint64)

        keys = _distinct(draw, n)
        if len(keys) > n:
            keys = np.sort(rng.choice(keys, n, replace=False))
    else:
        raise DatasetError(f"unknown dataset kind {kind!r}; expected one of {DATASET_KINDS}")
    return Dataset(kind, keys, seed)


def load_sosd(path: str | Path) -> Dataset:
    """Read a SOSD file: u64 count, then that many little-endian u64 keys."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DatasetError(f"{path}: missing count header")
    (count,) = np.frombuffer(raw[:8], dtype="<u8")
    if len(raw) != 8 + 8 * int(count):
        raise DatasetError(f"{path}: header says {int(count)} keys but file holds {(len(raw) - 8) / 8:g}")
    keys = np.unique(np.frombuffer(raw[8:], dtype="<u8").astype(np.uint64))
    return Dataset(f"sosd:{Path(path).name}", keys)


def write_sosd(path: str | Path, keys: Sequence[int]) -> None:
    arr = np.asarray(keys, dtype="<u8")
    Path(path).write_bytes(np.array([len(arr)], dtype="<u8").tobytes() + arr.tobytes())


def dataset_from_arg(arg: str, n: int, seed: int = 0) -> Dataset:
    if arg.startswith("sosd:"):
        return load_sosd(arg[5:])
    return generate(arg, n, seed)


def split_holdout(ds: Dataset, holdout: int, seed: int = 0) -> tuple[list[int], list[int]]:
    """Hold ``holdout`` uniformly chosen keys back as a pool of future inserts."""
    holdout = min(holdout, len(ds) - 1) if len(ds) > 1 else 0
    rng = np.random.default_rng(seed + 1)
    mask = np.zeros(len(ds), dtype=bool)
    pool_idx = rng.choice(len(ds), holdout, replace=False) if holdout else np.array([], dtype=np.int64)
    mask[pool_idx] = True
    load = [int(k) for k in ds.keys[~mask]]
    pool = [int(ds.keys[i]) for i in pool_idx]
    return load, pool


# -- zipf --------------------------------------------------------------------


def generalized_harmonic(n: int, alpha: float) -> float:
    """H_{n,alpha} = sum_{k=1..n} k^-alpha."""
    if n < 1:
        return 0.0
    if alpha == 1.0:
        return float(special.digamma(n + 1) + np.euler_gamma)
    if alpha > 1.0:
        return float(special.zeta(alpha, 1) - special.zeta(alpha, n + 1))
    m = min(n, 1_000_000)
    head = float(np.sum(np.arange(1, m + 1, dtype=np.float64) ** -alpha))
    if m == n:
        return head
    # Euler-Maclaurin tail for k = m+1..n
    f = lambda x: x**-alpha  # noqa: E731
    integral = ((n ** (1 - alpha)) - (m ** (1 - alpha))) / (1 - alpha)
    df = lambda x: -alpha * x ** (-alpha - 1)  # noqa: E731
    tail = integral + (f(n) - f(m)) / 2 + (df(n) - df(m)) / 12
    return head + tail


def zipf_top_mass(top: int, n: int, alpha: float) -> float:
    return generalized_harmonic(top, alpha) / generalized_harmonic(n, alpha)


def _helper1(x: np.ndarray) -> np.ndarray:
    small = np.abs(x) <= 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1 - x / 2 + x * x / 3 - x**3 / 4, np.log1p(safe) / safe)


def _helper2(x: np.ndarray) -> np.ndarray:
    small = np.abs(x) <= 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1 + x / 2 + x * x / 6 + x**3 / 24, np.expm1(safe) / safe)


class ZipfSampler:
    """Ranks in ``1..n`` with P(r) proportional to r^-alpha, by rejection-inversion.

    Draws cost O(1) regardless of ``n``, so ``n`` in the hundreds of millions
    is fine.
    """

    def __init__(self, n: int, alpha: float, seed: int = 0) -> None:
        if n < 1:
            raise ValueError("n must be >= 1")
        if alpha < 0:
            raise ValueError("alpha must be >= 0")
        self.n = n
        self.alpha = float(alpha)
        self.rng = np.random.default_rng(seed)
        if self.alpha > 0:
            self._hx1 = float(self._h_integral(np.array(1.5))) - 1.0
            self._hn = float(self._h_integral(np.array(n + 0.5)))
            self._s = 2.0 - float(self._h_integral_inv(self._h_integral(np.array(2.5)) - self._h(np.array(2.0))))

    def _h(self, x: np.ndarray) -> np.ndarray:
        return np.exp(-self.alpha * np.log(x))

    def _h_integral(self, x: np.ndarray) -> np.ndarray:
        lx = np.log(x)
        return _helper2((1.0 - self.alpha) * lx) * lx

    def _h_integral_inv(self, x: np.ndarray) -> np.ndarray:
        t = np.maximum(x * (1.0 - self.alpha), -1.0)
        return np.exp(_helper1(t) * x)

    def sample(self, size: int) -> np.ndarray:
        if self.alpha == 0:
            return self.rng.integers(1, self.n + 1, size=size)
        out = np.empty(size, dtype=np.int64)
        todo = np.arange(size)
        while len(todo):
            u = self._hn + self.rng.random(len(todo)) * (self._hx1 - self._hn)
            x = self._h_integral_inv(u)
            k = np.clip(np.floor(x + 0.5), 1, self.n)
            ok = (k - x <= self._s) | (u >= self._h_integral(k + 0.5) - self._h(k))
            out[todo[ok]] = k[ok].astype(np.int64)
            todo = todo[~ok]
        return out

    def pmf(self) -> np.ndarray:
        """Exact probabilities for ranks 1..n (only sensible for small n)."""
        w = np.arange(1, self.n + 1, dtype=np.float64) ** -self.alpha
        return w / w.sum()


def zipf_sample(n: int, alpha: float, size: int, seed: int = 0) -> np.ndarray:
    return ZipfSampler(n, alpha, seed).sample(size)


# -- workloads ---------------------------------------------------------------

RMW = "rmw"
MIXES: dict[str, dict[str, float]] = {
    "a": {"get": 0.5, "update": 0.5},
    "b": {"get": 0.95, "update": 0.05},
    "c": {"get": 1.0},
    "d": {"get": 0.95, "insert": 0.05},
    "e": {"range": 0.95, "insert": 0.05},
    "f": {"get": 0.5, RMW: 0.5},
    "insert": {"insert": 1.0},
    "range": {"range": 1.0},
    # not a YCSB mix: every operation type, used by the equivalence checks
    "mixed": {"get": 0.45, "update": 0.2, "insert": 0.15, "delete": 0.1, "range": 0.1},
}
INSERT_SELECTION = "uniform draws from a held-out key pool"


@dataclass
class WorkloadSpec:
    workload: str = "c"
    popularity: str = "zipf"  # or "uniform"
    alpha: float = 0.99
    ops: int = 100_000
    duration_s: float | None = None
    workers: int = 4
    qd_get: int = 32
    qd_write: int = 18
    range_span: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.workload not in MIXES:
            raise ValueError(f"workload must be one of {sorted(MIXES)}, got {self.workload!r}")
        if self.popularity not in ("zipf", "uniform"):
            raise ValueError(f"popularity must be zipf or uniform, got {self.popularity!r}")
        if self.workers < 1 or self.ops < 0:
            raise ValueError("workers must be >= 1 and ops >= 0")
        if abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise ValueError("mix fractions must sum to 1")

    @property
    def mix(self) -> dict[str, float]:
        return MIXES[self.workload]

    def inserts_needed(self) -> int:
        frac = self.mix.get("insert", 0.0)
        return math.ceil(self.ops * frac * 1.2) + 16 if frac else 0


@dataclass
class Streams:
    """Per-worker call lists; keys are partitioned so each key has one owner."""

    calls: list[list[Call]]
    inserts_skipped: int = 0


def build_streams(spec: WorkloadSpec, keys: Sequence[int], insert_pool: Sequence[int] = ()) -> Streams:
    if not keys:
        raise ValueError("workload needs a non-empty key set")
    rng = np.random.default_rng(spec.seed)
    n = len(keys)
    kinds = list(spec.mix)
    choice = rng.choice(len(kinds), size=spec.ops, p=[spec.mix[k] for k in kinds])
    if spec.popularity == "zipf":
        ranks = ZipfSampler(n, spec.alpha, spec.seed + 7).sample(spec.ops) - 1
        # Scatter popular ranks over the key space.
        idx = rng.permutation(n)[ranks]
    else:
        idx = rng.integers(0, n, size=spec.ops)
    values = rng.integers(0, U64_MAX, size=spec.ops, dtype=np.uint64, endpoint=True)
    W = spec.workers
    calls: list[list[Call]] = [[] for _ in range(W)]
    pool = list(insert_pool)
    next_insert = 0
    skipped = 0
    for j in range(spec.ops):
        kind = kinds[choice[j]]
        i = int(idx[j])
        key = int(keys[i])
        val = int(values[j])
        if kind == "get":
            calls[i % W].append(Call(Op.GET, key))
        elif kind == "update":
            calls[i % W].append(Call(Op.UPDATE, key, val))
        elif kind == "delete":
            calls[i % W].append(Call(Op.DELETE, key))
        elif kind == RMW:
            calls[i % W].append(Call(Op.GET, key))
            calls[i % W].append(Call(Op.UPDATE, key, val))
        elif kind == "range":
            calls[i % W].append(Call(Op.RANGE, key, max_count=spec.range_span))
        elif kind == "insert":
            if next_insert >= len(pool):
                skipped += 1
                continue
            calls[next_insert % W].append(Call(Op.INSERT, pool[next_insert], val))
            next_insert += 1
    return Streams(calls, skipped)


def replay_oracle(initial: dict[int, int], streams: Streams) -> tuple[dict[int, int], list[list[int | None]]]:
    """Final state plus the expected GET answers of every worker, in stream order.

    Valid because each key is owned by exactly one worker, so the relative
    order of operations on a key is that worker's stream order.
    """
    state = dict(initial)
    expected: list[list[int | None]] = []
    for stream in streams.calls:
        exp: list[int | None] = []
        for c in stream:
            if c.op is Op.GET:
                exp.append(state.get(c.key))
            elif c.op in (Op.INSERT, Op.UPDATE):
                state[c.key] = c.value
            elif c.op is Op.DELETE:
                state.pop(c.key, None)
        expected.append(exp)
    return state, expected


# -- metrics -----------------------------------------------------------------


@dataclass
class Metrics:
    workload: str
    ops_issued: int = 0
    ops_completed: int = 0
    ops_failed: int = 0
    duration_s: float = 0.0
    throughput_ops: float = 0.0
    latency_us: dict[str, float] = field(default_factory=dict)
    per_op: dict[str, dict[str, int]] = field(default_factory=dict)
    statuses: dict[str, int] = field(default_factory=dict)
    retries: int = 0
    resends: int = 0
    timeouts: int = 0
    alternate_gets: int = 0
    cache_hit_ratio: float | None = None
    patches: int | None = None
    stitch: dict[str, int] = field(default_factory=dict)
    modeled: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    schema: int = 1

    def reconciles(self) -> bool:
        if self.ops_issued != self.ops_completed + self.ops_failed:
            return False
        return all(v["issued"] == v["completed"] + v["failed"] for v in self.per_op.values())


def summarize(spec: WorkloadSpec, results: list[list[Result]], duration: float, clients: list[Client],
              store=None) -> Metrics:
    flat = [r for rs in results for r in rs]
    m = Metrics(spec.workload, duration_s=duration)
    m.ops_issued = len(flat)
    m.ops_completed = sum(1 for r in flat if r.ok)
    m.ops_failed = m.ops_issued - m.ops_completed
    m.throughput_ops = m.ops_completed / duration if duration > 0 else 0.0
    lat = np.array([r.latency_s * 1e6 for r in flat if r.ok]) if flat else np.array([])
    if len(lat):
        p = np.percentile(lat, [50, 90, 99, 99.9])
        m.latency_us = {"p50": float(p[0]), "p90": float(p[1]), "p99": float(p[2]), "p999": float(p[3]),
                        "mean": float(lat.mean())}
    per: dict[str, Counter] = {}
    statuses: Counter = Counter()
    for r in flat:
        c = per.setdefault(r.op.name.lower(), Counter())
        c["issued"] += 1
        c["completed" if r.ok else "failed"] += 1
        statuses[r.status.name.lower() if r.status is not None else "failed"] += 1
    m.per_op = {k: {"issued": v["issued"], "completed": v["completed"], "failed": v["failed"]} for k, v in per.items()}
    m.statuses = dict(statuses)
    m.retries = sum(c.stats.retry_status for c in clients)
    m.resends = sum(c.stats.resends for c in clients)
    m.timeouts = sum(c.stats.timeouts for c in clients)
    m.alternate_gets = sum(c.stats.alternate_gets for c in clients)
    m.meta = {"popularity": spec.popularity, "alpha": spec.alpha, "workers": spec.workers,
              "qd_get": spec.qd_get, "qd_write": spec.qd_write, "seed": spec.seed,
              "insert_keys": INSERT_SELECTION}
    if store is not None:
        hits, lookups = store.engine.cache_stats()
        m.cache_hit_ratio = hits / lookups if lookups else None
        m.patches = store.host.stats.patches
        m.stitch = {k: int(v) for k, v in store.stitcher.stats.items()}
        m.modeled = store.engine.access_report()
    return m


@dataclass
class Endpoint:
    host: str
    base_port: int
    threads: int


def run_workload(spec: WorkloadSpec, endpoint: Endpoint, keys: Sequence[int], insert_pool: Sequence[int] = (),
                 store=None, streams: Streams | None = None,
                 client_config: ClientConfig | None = None) -> tuple[Metrics, list[list[Result]]]:
    """Drive the mix against a running server with one client per worker."""
    base = client_config or ClientConfig()
    cfg = ClientConfig(**{**asdict(base), "host": endpoint.host, "base_port": endpoint.base_port,
                          "threads": endpoint.threads, "qd_get": spec.qd_get, "qd_write": spec.qd_write})
    probe = Client(ClientConfig(**{**asdict(cfg), "resends": 4}), seed=spec.seed)
    try:
        if not probe.run([Call(Op.PING, 0)])[0].ok:
            raise ConnectionError(f"no PING answer from {endpoint.host}:{endpoint.base_port}")
    finally:
        probe.close()
    streams = streams or build_streams(spec, keys, insert_pool)
    clients = [Client(cfg, seed=spec.seed * 1000 + w) for w in range(spec.workers)]
    results: list[list[Result]] = [[] for _ in clients]
    deadline = time.monotonic() + spec.duration_s if spec.duration_s else None

    def work(w: int) -> None:
        calls = streams.calls[w]
        if deadline is None:
            results[w] = clients[w].run(calls)
            return
        chunk = 256
        for a in range(0, len(calls), chunk):
            if time.monotonic() >= deadline:
                break
            results[w].extend(clients[w].run(calls[a : a + chunk]))

    threads = [threading.Thread(target=work, args=(w,), name=f"bench-{w}") for w in range(spec.workers)]
    t0 = time.monotonic()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    duration = time.monotonic() - t0
    m = summarize(spec, results, duration, clients, store)
    m.meta["inserts_skipped"] = streams.inserts_skipped
    for c in clients:
        c.close()
    return m, results


def report(metrics: Metrics, path: str | Path | None = None, fmt: str = "json") -> str:
    """Render metrics as JSON or a flat two-column CSV; write to ``path`` if given."""
    data = asdict(metrics)
    if fmt == "json":
        text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in sorted(_flatten(data).items()):
            w.writerow([k, v])
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        Path(path).write_text(text)
    return text


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, name + "."))
        else:
            out[name] = v
    return out


def check_results(results: list[list[Result]], expected: list[list[int | None]]) -> list[str]:
    """Compare GET answers against the replay oracle; returns mismatch descriptions."""
    bad = []
    for w, (rs, exp) in enumerate(zip(results, expected)):
        gets = [r for r in rs if r.op is Op.GET]
        for r, e in zip(gets, exp):
            got = r.value if r.status is Status.OK else None
            if not r.ok or got != e:
                bad.append(f"worker {w} GET {r.key}: got {got} ({r.status}), expected {e}")
    return bad
