"""Verification suites shared by ``dpastore selftest`` and the test-suite.

Every suite returns a :class:`SuiteResult` with a verdict and the measured
numbers behind it, so callers can print or serialize them.
"""

from __future__ import annotations

import math
import random
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .client import ClientConfig
from .costmodel import (
    AccessClass,
    AccessRecorder,
    AccessTrace,
    LatencyConstants,
    TraversalModel,
    modeled_request_latency,
    modeled_throughput,
)
from .engine import CACHE_CAPACITY, EngineConfig, HotCache
from .nodes import CorruptionError, InnerNode, LeafNode, PoisonedRead
from .pla import EpsilonConfig, train_segments, verify_bound
from .server import Server
from .stitch import Kind, ProtocolFault
from .store import Store, StoreConfig
from .wire import (
    MAX_RANGE_PAIRS,
    MTU_PAYLOAD,
    CacheHint,
    DropPacket,
    MalformedPacket,
    Op,
    Request,
    Response,
    Status,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
    hint_for_key,
)
from .workload import (
    Endpoint,
    WorkloadSpec,
    build_streams,
    check_results,
    generate,
    replay_oracle,
    split_holdout,
    zipf_top_mass,
)

U64 = (1 << 64) - 1


@dataclass
class SuiteResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        shown = ", ".join(f"{k}={_fmt(v)}" for k, v in self.details.items() if not isinstance(v, (list, dict)))
        return f"[{verdict}] {self.name} ({self.seconds:.1f}s) {shown}"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _timed(name: str, fn: Callable[[], tuple[bool, dict]]) -> SuiteResult:
    t0 = time.perf_counter()
    ok, details = fn()
    return SuiteResult(name, bool(ok), details, time.perf_counter() - t0)


# -- epsilon bound -------------------------------------------------------------


def eps_violations(keys: list[int], eps: int, max_len: int | None) -> tuple[int, int]:
    """(segments, violating segments) for a training run checked in fixed point."""
    segs = train_segments(keys, eps, max_len=max_len)
    bad = 0
    for start, seg in segs:
        end = start + seg.covered_count
        if not verify_bound(seg, keys[start:end], range(0, end - start)):
            bad += 1
    return len(segs), bad


def eps_bound_suite(n: int = 1_000_000, seed: int = 0, kinds=("sparse", "dense4x", "clustered", "lognormal"),
                    eps_inner: int = 4, eps_leaf: int = 8) -> SuiteResult:
    """Leaf models (eps_leaf, 128-key leaves) and inner models over leaf pivots (eps_inner)."""

    def run():
        details = {}
        total_bad = 0
        for kind in kinds:
            keys = generate(kind, n, seed).key_list()
            leaves = train_segments(keys, eps_leaf, max_len=128)
            bad = 0
            for start, seg in leaves:
                end = start + seg.covered_count
                if not verify_bound(seg, keys[start:end], range(end - start)):
                    bad += 1
            pivots = [keys[s] for s, _ in leaves]
            inner_segs, inner_bad = eps_violations(pivots, eps_inner, 128)
            details[f"{kind}_leaf_segments"] = len(leaves)
            details[f"{kind}_inner_segments"] = inner_segs
            details[f"{kind}_violations"] = bad + inner_bad
            total_bad += bad + inner_bad
        details["violations"] = total_bad
        return total_bad == 0, details

    return _timed("eps-bound", run)


# -- cost model ----------------------------------------------------------------


def measured_inner_lines(n: int = 200_000, seed: int = 0, probes: int = 2000) -> dict:
    """Bulk-load a tree and measure device lines per inner node over uncached GETs."""
    keys = generate("sparse", n, seed).key_list()
    cfg = StoreConfig(engine=EngineConfig(threads=1, cache_enabled=False))
    st = Store(cfg)
    st.bulk_load(keys)
    ctx = st.engine.contexts[0]
    rng = random.Random(seed)
    rec = AccessRecorder(True)
    ctx.rec = rec
    for _ in range(probes):
        k = rng.choice(keys)
        resp = ctx.handle(Request(Op.GET, 0, k))[0]
        if resp.status is not Status.OK or resp.value != k:
            raise AssertionError(f"GET {k} returned {resp}")
    tr = rec.total
    dev = tr[AccessClass.DEVICE_MEMORY]
    dma = tr[AccessClass.HOST_DMA]
    visits = tr.events["inner_visits"]
    depth = st.depth()
    leaf_dev = 1.0  # one leaf line; empty buffers add none
    inner_lines = (dev - probes * leaf_dev) / visits
    return {
        "depth": depth,
        "inner_lines": inner_lines,
        "dma_per_get": dma / probes,
        "modeled_us": rec.modeled_us / probes,
        "closed_form_us": TraversalModel(depth, inner_lines, leaf_dev, dma / probes).latency_us(),
    }


def cost_model_suite(measure: bool = True) -> SuiteResult:
    def run():
        base = TraversalModel(depth=3, inner_lines=4.5, leaf_device_lines=1, leaf_dma=2)
        lat = base.latency_us()
        mops = modeled_throughput(176, lat)
        cached = TraversalModel(depth=3, inner_lines=4.5, leaf_device_lines=1, leaf_dma=2, cached_root_lines=2)
        root_us = cached.root_latency_us()
        cached_mops = modeled_throughput(176, cached.latency_us())
        fast = LatencyConstants(device_memory_ns=100.0)
        fast_mops = modeled_throughput(176, base.latency_us(fast))
        d = {
            "latency_us": lat,
            "mops_176": mops,
            "root_cached_delta_us": root_us,
            "cached_root_mops": cached_mops,
            "dev100ns_mops": fast_mops,
            "empty_trace_us": modeled_request_latency(AccessTrace()),
        }
        ok = (
            abs(lat - 6.47) <= 0.01
            and abs(mops - 27.2) <= 0.1
            and abs(root_us - 1.2905) <= 1e-4
            and abs(cached_mops - 31.05) <= 0.1
            and fast_mops > 62
            and d["empty_trace_us"] == 0
        )
        if measure:
            m = measured_inner_lines()
            d.update({f"measured_{k}": v for k, v in m.items()})
            faithful = abs(m["modeled_us"] - m["closed_form_us"]) * 1000 <= 1.0
            d["model_faithful"] = faithful
            ok = ok and faithful and 4.0 <= m["inner_lines"] <= 5.0
        return ok, d

    return _timed("cost-model", run)


# -- bloom ---------------------------------------------------------------------


def bloom_fp_rate(caches: int = 20, absent: int = 100_000, seed: int = 0) -> tuple[float, list[float]]:
    """Fill ``caches`` hot caches with 96 keys each and probe absent keys.

    Returns the mean false-positive rate and the per-cache rates.
    """
    rng = random.Random(seed)
    rates = []
    per_cache = max(1, absent // caches)
    for c in range(caches):
        cache = HotCache(seed=seed * 31 + c)
        present = set()
        while len(present) < CACHE_CAPACITY:
            k = rng.getrandbits(64)
            if k not in present:
                present.add(k)
                cache.admit(k, k, hint_for_key(k))
        fp = 0
        for _ in range(per_cache):
            k = rng.getrandbits(64)
            while k in present:
                k = rng.getrandbits(64)
            if cache.bloom_test(hint_for_key(k)):
                fp += 1
        rates.append(fp / per_cache)
    return float(np.mean(rates)), rates


def bloom_suite(seed: int = 0) -> SuiteResult:
    def run():
        rate, rates = bloom_fp_rate(seed=seed)
        analytic = (1 - math.exp(-3 * 96 / 256)) ** 3
        return 0.28 <= rate <= 0.34, {"fp_rate": rate, "target": 0.31, "analytic": analytic,
                                       "min_cache": min(rates), "max_cache": max(rates)}

    return _timed("bloom", run)


# -- zipf ----------------------------------------------------------------------


def zipf_suite() -> SuiteResult:
    def run():
        mass = zipf_top_mass(16_896, 200_000_000, 1.0)
        return mass > 0.5, {"top_16896_mass": mass}

    return _timed("zipf", run)


# -- wire ----------------------------------------------------------------------


def random_request(rng: random.Random) -> Request:
    op = Op(rng.randrange(6))
    hint = None
    if op is Op.GET and rng.random() < 0.5:
        hint = CacheHint((rng.randrange(256), rng.randrange(256), rng.randrange(256)), rng.randrange(24))
    value = rng.getrandbits(64) if op in (Op.INSERT, Op.UPDATE) else 0
    count = rng.randint(1, 0xFFFF) if op is Op.RANGE else 0
    return Request(op, rng.getrandbits(64), rng.getrandbits(64), value, count, hint)


def random_response(rng: random.Random) -> Response:
    if rng.random() < 0.5:
        n = rng.randint(0, MAX_RANGE_PAIRS)
        pairs = tuple((rng.getrandbits(64), rng.getrandbits(64)) for _ in range(n))
        status = rng.choice([Status.OK, Status.END_OF_RANGE])
        return Response(Op.RANGE, status, rng.getrandbits(64), rng.getrandbits(64), 0, pairs, rng.randrange(1 << 16))
    op = rng.choice([Op.GET, Op.INSERT, Op.UPDATE, Op.DELETE, Op.PING])
    status = rng.choice([Status.OK, Status.NOT_FOUND, Status.RETRY, Status.MALFORMED])
    return Response(op, status, rng.getrandbits(64), rng.getrandbits(64), rng.getrandbits(64), (), 0, rng.randrange(2))


def fuzz_packet(rng: random.Random, seeds: list[bytes]) -> bytes:
    r = rng.random()
    if r < 0.3:
        return rng.randbytes(rng.randrange(0, 80))
    base = bytearray(rng.choice(seeds))
    if r < 0.6:
        for _ in range(rng.randint(1, 4)):
            if base:
                base[rng.randrange(len(base))] = rng.randrange(256)
    elif r < 0.8:
        base = base[: rng.randrange(len(base) + 1)]
    else:
        base += rng.randbytes(rng.randint(1, 16))
    return bytes(base)


def wire_suite(roundtrips: int = 1_000_000, fuzz: int = 1_000_000, seed: int = 0) -> SuiteResult:
    def run():
        rng = random.Random(seed)
        mismatches = 0
        for i in range(roundtrips):
            if i & 1:
                req = random_request(rng)
                if decode_request(encode_request(req)) != req:
                    mismatches += 1
            else:
                resp = random_response(rng)
                if decode_response(encode_response(resp)) != resp:
                    mismatches += 1
        # largest RANGE response
        full = Response(Op.RANGE, Status.OK, U64, U64, 0, tuple((U64, U64) for _ in range(MAX_RANGE_PAIRS)))
        max_bytes = len(encode_response(full))
        seeds = [encode_request(random_request(rng)) for _ in range(64)]
        crashes = dropped = malformed = accepted = 0
        for _ in range(fuzz):
            pkt = fuzz_packet(rng, seeds)
            try:
                decode_request(pkt)
                accepted += 1
            except DropPacket:
                dropped += 1
            except MalformedPacket:
                malformed += 1
            except Exception:  # noqa: BLE001 - anything else is a crash
                crashes += 1
        ok = mismatches == 0 and crashes == 0 and max_bytes <= MTU_PAYLOAD
        return ok, {"roundtrip_mismatches": mismatches, "max_range_bytes": max_bytes, "fuzz_crashes": crashes,
                    "fuzz_dropped": dropped, "fuzz_malformed": malformed, "fuzz_accepted": accepted}

    return _timed("wire", run)


# -- schedule fuzzing of patch/stitch/epochs ----------------------------------------


@dataclass
class FuzzStats:
    schedules: int = 0
    reads: int = 0
    mismatches: list[str] = field(default_factory=list)
    faults: list[str] = field(default_factory=list)
    poisoned: int = 0
    split_leaf_sizes: list[int] = field(default_factory=list)
    counters: Counter = field(default_factory=Counter)

    def merge(self, other: "FuzzStats") -> None:
        self.schedules += other.schedules
        self.reads += other.reads
        self.mismatches.extend(other.mismatches)
        self.faults.extend(other.faults)
        self.poisoned += other.poisoned
        self.split_leaf_sizes.extend(other.split_leaf_sizes)
        self.counters.update(other.counters)

    @property
    def max_split_leaf(self) -> int:
        return max(self.split_leaf_sizes, default=0)


def irregular_keys(rng: random.Random, n: int, jump_p: float = 0.3) -> list[int]:
    """Short dense runs separated by log-uniform jumps; hard for linear models."""
    keys = []
    k = rng.getrandbits(20)
    for _ in range(n):
        keys.append(k)
        k += 1 + (int(math.exp(rng.uniform(0, 38))) if rng.random() < jump_p else rng.randint(0, 8))
    return keys


# Small error bounds give many small nodes, so small trees still reach depth 3.
FUZZ_EPSILONS = ((4, 8), (1, 1), (1, 2), (2, 2))


class _Schedule:
    """One randomized interleaving of writes, patches, stitch steps and reads.

    Reads run between every two stitch commands, and the reader context's
    access hook may apply further stitch commands and reclamation while a
    read is in flight, so every atomic step of the protocol is observed.
    """

    def __init__(self, seed: int, epoch_mode: bool = False, writes: tuple[int, int] = (10, 60),
                 size: tuple[int, int] = (30, 600)) -> None:
        self.rng = rng = random.Random(seed)
        self.epoch_mode = epoch_mode
        self.stats = FuzzStats(schedules=1)
        keys = irregular_keys(rng, rng.randint(*size))
        cfg = StoreConfig(
            engine=EngineConfig(threads=3, buffer_capacity=rng.choice([1, 2, 4, 8]),
                                cache_enabled=rng.random() < 0.5, seed=seed,
                                eps=EpsilonConfig(*rng.choice(FUZZ_EPSILONS))),
            partitions=rng.randint(1, 4),
            patchers=1,
        )
        self.store = st = Store(cfg)
        st.stitcher.command_latency_us = 0.0
        st.bulk_load(keys, [k ^ 0x5A5A for k in keys])
        self.oracle = {k: k ^ 0x5A5A for k in keys}
        self.keys = sorted(self.oracle)
        self.n_writes = rng.randint(*writes)
        self.stall: dict[int, int] = {}
        self.mid_p = 0.3 if epoch_mode else 0.1
        self._in_hook = False
        self._inflight: tuple[int, int | None] | None = None  # (key, new value) of the write in progress
        reader = st.engine.contexts[1]
        reader.rec.on_access = self._on_access

    # -- stitching with injected cross-queue delay

    def _step(self) -> bool:
        st = self.store.stitcher
        qs = [i for i, q in enumerate(st.queues) if q.items]
        if not qs:
            return False
        rng = self.rng
        for i in qs:
            if i not in self.stall and rng.random() < 0.05:
                self.stall[i] = rng.randint(1, 12)
        rng.shuffle(qs)
        qs.sort(key=lambda i: i in self.stall)  # delayed queues only when nothing else can move
        for i in qs:
            if st.step(i):
                for j in list(self.stall):
                    self.stall[j] -= 1
                    if self.stall[j] <= 0:
                        del self.stall[j]
                return True
        return False

    def _apply_one_patch(self) -> bool:
        pq = self.store.patchers.queue
        try:
            patch = pq.get_nowait()
        except Exception:  # queue.Empty
            return False
        try:
            self.store.host.apply_patch(patch)
        finally:
            pq.task_done()
        return True

    def _on_access(self, _cls) -> None:
        if self._in_hook or self.rng.random() >= self.mid_p:
            return
        self._in_hook = True
        try:
            r = self.rng.random()
            if r < 0.6:
                self._step()
            elif r < 0.8:
                self.store.engine.epochs.collect()
            elif self.epoch_mode:
                # A second reader runs whole requests while the first is paused.
                self._read(self.rng.choice(self.keys), tid=2)
        finally:
            self._in_hook = False

    # -- reads

    def _read(self, key: int, tid: int = 1) -> None:
        st = self.store
        self.stats.reads += 1
        try:
            # Hints only on the context that also takes the writes, as primary steering guarantees.
            hint = hint_for_key(key) if tid == 1 and self.rng.random() < 0.5 else None
            resp = st.execute(Request(Op.GET, 0, key, hint=hint), tid)[0]
        except PoisonedRead as exc:
            self.stats.poisoned += 1
            self.stats.mismatches.append(f"poisoned read of {key}: {exc}")
            return
        except CorruptionError as exc:
            self.stats.mismatches.append(f"corruption reading {key}: {exc}")
            return
        want = self.oracle.get(key)
        got = resp.value if resp.status is Status.OK else None
        if self._inflight is not None and self._inflight[0] == key and got == self._inflight[1]:
            return  # a nested read may linearize after the write it interrupts
        if got != want:
            self.stats.mismatches.append(f"GET {key}: got {got}, want {want}")

    def _read_range(self) -> None:
        st = self.store
        start = self.rng.choice(self.keys) if self.keys and self.rng.random() < 0.8 else self.rng.getrandbits(63)
        count = self.rng.randint(1, 12)
        self.stats.reads += 1
        try:
            frags = st.execute(Request(Op.RANGE, 0, start, max_count=count), 1)
        except PoisonedRead as exc:
            self.stats.poisoned += 1
            self.stats.mismatches.append(f"poisoned range at {start}: {exc}")
            return
        except CorruptionError as exc:
            self.stats.mismatches.append(f"corruption in range at {start}: {exc}")
            return
        got = [kv for f in frags for kv in f.pairs]
        want = [(k, self.oracle[k]) for k in self.keys if k >= start][:count]
        if got != want:
            self.stats.mismatches.append(f"RANGE {start}+{count}: got {got[:4]}..., want {want[:4]}...")

    def _reads(self) -> None:
        rng = self.rng
        for _ in range(2):
            if self.keys:
                self._read(rng.choice(self.keys))
        self._read(rng.getrandbits(64))
        if rng.random() < 0.3:
            self._read_range()

    def _sync_keys(self) -> None:
        self.keys = sorted(self.oracle)

    # -- writes

    def _write(self) -> None:
        rng = self.rng
        r = rng.random()
        if r < 0.45 or not self.keys:
            if self.keys and rng.random() < 0.5:
                k = min(rng.choice(self.keys) + rng.randint(1, 3), U64)
            else:
                k = rng.getrandbits(rng.choice([20, 40, 63]))
            op, v = Op.INSERT, rng.getrandbits(64)
        elif r < 0.8:
            op, k, v = Op.UPDATE, rng.choice(self.keys), rng.getrandbits(64)
        else:
            op, k, v = Op.DELETE, rng.choice(self.keys), 0
        req = Request(op, 0, k, v)
        idle = 0
        while True:
            self._inflight = (k, None if op is Op.DELETE else v)
            try:
                resp = self.store.execute(req, 1)[0]
            finally:
                self._inflight = None
            if resp.status is not Status.RETRY:
                break
            # Buffer sealed: let the patch and some stitches through. A retry
            # with nothing pending is fine once (the hook may have finished
            # the replacement mid-request), not repeatedly.
            if self._apply_one_patch() or self._step():
                idle = 0
            else:
                idle += 1
                if idle > 3:
                    raise ProtocolFault(f"write to {k} stuck on RETRY with nothing pending")
            self._reads()
        if op is Op.DELETE:
            self.oracle.pop(k, None)
        else:
            self.oracle[k] = v
        self._sync_keys()

    def run(self) -> FuzzStats:
        rng = self.rng
        st = self.store
        try:
            for _ in range(self.n_writes):
                self._write()
                while rng.random() < 0.6:
                    moved = self._apply_one_patch() if rng.random() < 0.3 else self._step()
                    if not moved:
                        break
                    self._reads()
            # Wind down: ship partial buffers, apply everything, reading throughout.
            while True:
                moved = self._apply_one_patch() or self._step()
                if moved:
                    self._reads()
                    continue
                if st.engine.flush_buffers():
                    continue
                break
            if st.stitcher.deferred_count() or any(q.items for q in st.stitcher.queues):
                self.stats.faults.append("stitch queues did not drain")
        except ProtocolFault as exc:
            self.stats.faults.append(str(exc))
        except PoisonedRead as exc:
            # a write's descent hit reclaimed memory; the final state is meaningless after that
            self.stats.poisoned += 1
            self.stats.mismatches.append(f"poisoned write path: {exc}")
            return self.stats
        st.engine.epochs.collect()
        self.stats.faults.extend(st.faults())
        device = st.device_items()
        if device != sorted(self.oracle.items()):
            self.stats.mismatches.append(f"final device state differs ({len(device)} vs {len(self.oracle)} keys)")
        if st.host.items() != sorted(self.oracle.items()):
            self.stats.mismatches.append("final host replica differs from oracle")
        hs = st.host.stats
        self.stats.split_leaf_sizes.extend(hs.split_leaf_sizes)
        c = self.stats.counters
        c["leaf_splits"] += hs.leaf_splits
        c["inner_rebuilds"] += hs.inner_rebuilds
        c["root_installs"] += hs.root_installs - 1  # minus the bulk load
        c["inner_splits"] += len(hs.split_inner_segments)
        c["depth3_schedules"] += st.depth() >= 3
        c["deferred"] += st.stitcher.stats["deferred"]
        c["fences"] += st.stitcher.stats["fences"]
        c["connect_skipped"] += st.stitcher.stats["connect_skipped"]
        c["freed"] += st.engine.epochs.freed
        return self.stats


def run_schedule(seed: int, epoch_mode: bool = False) -> FuzzStats:
    return _Schedule(seed, epoch_mode).run()


def rcu_fuzz_suite(schedules: int = 10_000, seed: int = 0, epoch_mode: bool = False,
                   name: str = "rcu-fuzz") -> tuple[SuiteResult, FuzzStats]:
    total = FuzzStats()

    def run():
        for i in range(schedules):
            total.merge(run_schedule(seed * 1_000_003 + i, epoch_mode))
        ok = not total.mismatches and not total.faults and total.poisoned == 0
        d = {"schedules": total.schedules, "reads": total.reads, "mismatches": len(total.mismatches),
             "faults": len(total.faults), "poisoned_reads": total.poisoned,
             "max_split_leaf": total.max_split_leaf, **dict(total.counters)}
        if total.mismatches:
            d["first_mismatch"] = total.mismatches[0]
        if total.faults:
            d["first_fault"] = total.faults[0]
        return ok, d

    return _timed(name, run), total


def epoch_suite(schedules: int = 1000, seed: int = 7) -> tuple[SuiteResult, FuzzStats]:
    return rcu_fuzz_suite(schedules, seed, epoch_mode=True, name="epoch-canary")


def retrain_bound_result(stats: FuzzStats, cap: int = 32) -> SuiteResult:
    worst = stats.max_split_leaf
    over = sum(1 for s in stats.split_leaf_sizes if s > cap)
    return SuiteResult("retrain-bound", over == 0 and bool(stats.split_leaf_sizes),
                       {"split_leaves": len(stats.split_leaf_sizes), "max_size": worst, "violations": over})


# -- end-to-end over UDP -------------------------------------------------------------


def udp_oracle_run(ops: int, n: int = 20_000, workers: int = 4, threads: int = 4, seed: int = 0,
                   drop_rate: float = 0.0, popularity: str = "uniform", workload: str = "mixed") -> dict:
    """Run a mixed workload through the UDP stack and compare everything with a replay oracle."""
    spec = WorkloadSpec(workload=workload, popularity=popularity, ops=ops, workers=workers, seed=seed)
    ds = generate("sparse", n + spec.inserts_needed(), seed)
    load, pool = split_holdout(ds, spec.inserts_needed(), seed)
    initial = {k: k ^ 0xABCD for k in load}
    st = Store(StoreConfig(engine=EngineConfig(threads=threads, seed=seed)), threaded=True)
    st.bulk_load(list(initial), list(initial.values()))
    srv = Server(st, drop_rate=drop_rate, seed=seed)
    srv.start()
    streams = build_streams(spec, load, pool)
    final, expected = replay_oracle(initial, streams)
    from .workload import run_workload

    try:
        metrics, results = run_workload(
            spec, Endpoint(srv.host, srv.base_port, threads), load, pool, store=st, streams=streams,
            client_config=ClientConfig(),
        )
    finally:
        srv.stop()
    st.quiesce(flush=True)
    get_mismatches = check_results(results, expected)
    range_bad = 0
    for rs in results:
        for r in rs:
            if r.op is Op.RANGE and r.ok:
                ks = [k for k, _ in r.pairs]
                if ks != sorted(set(ks)) or len(ks) > spec.range_span:
                    range_bad += 1
    device = st.device_items()
    host = st.host.items()
    want = sorted(final.items())
    return {
        "ops": metrics.ops_issued,
        "completed": metrics.ops_completed,
        "failed": metrics.ops_failed,
        "get_mismatches": len(get_mismatches),
        "first_get_mismatch": get_mismatches[0] if get_mismatches else "",
        "range_violations": range_bad,
        "device_equals_oracle": device == want,
        "host_equals_oracle": host == want,
        "faults": len(st.faults()),
        "throughput_ops": metrics.throughput_ops,
        "resends": metrics.resends,
        "retries": metrics.retries,
        "dropped_injected": srv.counters().dropped_injected,
        "reconciles": metrics.reconciles(),
    }


def _udp_ok(d: dict) -> bool:
    return (d["failed"] == 0 and d["get_mismatches"] == 0 and d["range_violations"] == 0
            and d["device_equals_oracle"] and d["host_equals_oracle"] and d["faults"] == 0 and d["reconciles"])


def oracle_suite(ops: int = 1_000_000, seed: int = 0, n: int = 20_000) -> SuiteResult:
    def run():
        half = ops // 2
        uni = udp_oracle_run(half, n=n, seed=seed, popularity="uniform")
        zipf = udp_oracle_run(ops - half, n=n, seed=seed + 1, popularity="zipf")
        d = {f"uniform_{k}": v for k, v in uni.items()}
        d.update({f"zipf_{k}": v for k, v in zipf.items()})
        return _udp_ok(uni) and _udp_ok(zipf), d

    return _timed("oracle-equivalence", run)


def loss_suite(ops: int = 100_000, seed: int = 3, drop_rate: float = 0.10, n: int = 20_000) -> SuiteResult:
    def run():
        d = udp_oracle_run(ops, n=n, seed=seed, drop_rate=drop_rate, popularity="zipf")
        return _udp_ok(d) and d["dropped_injected"] > 0, d

    return _timed("loss-resilience", run)


# -- bulk-load statistics ---------------------------------------------------------


def index_stats(st: Store, n_keys: int, log: list | None = None) -> dict:
    """Index footprint and stitch traffic of a loaded store.

    ``log`` is the stitcher's command log, when one was attached.
    """
    mem = st.engine.memory
    inner = [n for n in mem.nodes.values() if isinstance(n, InnerNode)]
    leaves = [n for n in mem.nodes.values() if isinstance(n, LeafNode)]
    index_bytes = mem.index_bytes()
    raw = 16 * n_keys
    s = st.stitcher.stats
    out = {
        "keys": n_keys,
        "depth": st.depth(),
        "inner_nodes": len(inner),
        "leaf_nodes": len(leaves),
        "inner_segments": sum(n.segment_count for n in inner),
        "leaf_segments": len(leaves),
        "index_bytes": index_bytes,
        "raw_kv_bytes": raw,
        "overhead_ratio": index_bytes / raw if raw else 0.0,
        "stitch_commands": int(s["copies"] + s["connects"] + s["clears"] + s["fences"]),
        "stitch_bytes": int(s["bytes"]),
        "stitch_copy_bytes": int(s["copy_bytes"]),
    }
    if log is not None:
        out["copy_payload_bytes"] = sum(c.node.device_bytes() for _, c in log if c.kind is Kind.COPY)
    return out


def bulkload_stats(keys: list[int], eps_inner: int = 4, eps_leaf: int = 8, infinite: bool = False,
                   partitions: int = 4) -> dict:
    cfg = StoreConfig(engine=EngineConfig(threads=1, eps=EpsilonConfig(eps_inner, eps_leaf, infinite)),
                      partitions=partitions)
    st = Store(cfg)
    log: list = []
    st.stitcher.log = log
    t0 = time.perf_counter()
    st.bulk_load(keys)
    out = index_stats(st, len(keys), log)
    out["build_seconds"] = time.perf_counter() - t0
    return out


def overhead_suite(n: int = 1_000_000, seed: int = 0, sosd: dict[str, str] | None = None) -> SuiteResult:
    """Informational: overhead ratios against the 32 % sparse reference."""

    def run():
        d = {}
        for kind in ("sparse", "dense4x"):
            s = bulkload_stats(generate(kind, n, seed).key_list())
            d[f"{kind}_overhead"] = s["overhead_ratio"]
            d[f"{kind}_depth"] = s["depth"]
        ok = abs(d["sparse_overhead"] - 0.32) <= 0.15
        if sosd:
            from .workload import load_sosd

            for name, path in sosd.items():
                d[f"{name}_overhead"] = bulkload_stats(load_sosd(path).key_list())["overhead_ratio"]
            if "wiki" in sosd:
                ok = ok and d["wiki_overhead"] < d["dense4x_overhead"] < d["sparse_overhead"]
        return ok, d

    return _timed("memory-overhead", run)


SUITES = ("oracle-equivalence", "rcu-fuzz", "epoch-canary", "bloom", "eps-bound", "cost-model",
          "zipf", "wire", "loss", "retrain-bound")
