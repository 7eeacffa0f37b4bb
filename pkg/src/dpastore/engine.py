"""Device-domain request engine.

Traverser contexts serve GET/INSERT/UPDATE/DELETE/RANGE/PING against the
device tree without taking locks. Writes land in per-leaf insert buffers;
the write that fills a buffer's last slot emits a patch request to the host.
Each context owns a small bloom-guarded hot cache, and an epoch scheme defers
reclamation of replaced nodes until no reader can still hold them.
"""

from __future__ import annotations

import enum
import itertools
import queue
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from .costmodel import BF3, AccessClass, AccessRecorder, LatencyConstants
from .nodes import (
    DEV,
    DeviceMemory,
    HostArray,
    LeafNode,
    PoisonedRead,
    find_leaf,
    leaf_locate,
    leaf_lower_bound,
)
from .pla import EpsilonConfig
from .wire import MAX_RANGE_PAIRS, CacheHint, Op, Request, Response, Status, hint_for_key

DEFAULT_BUFFER_CAPACITY = 16
RECEIVE_QUEUE_DEPTH = 256
BLOOM_BITS = 256
CACHE_BUCKETS = 24
CACHE_WAYS = 4
CACHE_CAPACITY = CACHE_BUCKETS * CACHE_WAYS
L1 = AccessClass.LOCAL_L1


class Tag(enum.IntEnum):
    INSERT = 1
    UPDATE = 2
    DELETE = 3


OP_TAG = {Op.INSERT: Tag.INSERT, Op.UPDATE: Tag.UPDATE, Op.DELETE: Tag.DELETE}


# -- insert buffer ---------------------------------------------------------


class InsertBuffer:
    """Fixed-capacity append log with reserve/commit counters.

    ``next()`` on an ``itertools.count`` is atomic under the interpreter
    lock, which stands in for the hardware fetch-and-add. A slot is published
    as one immutable ``(key, value, tag)`` tuple, so a visible key always
    comes with its value.
    """

    __slots__ = ("capacity", "entries", "commit", "sealed", "_reserve", "clears")

    def __init__(self, capacity: int = DEFAULT_BUFFER_CAPACITY) -> None:
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[tuple[int, int, Tag] | None] = [None] * capacity
        self.commit = 0
        self.sealed = False
        self._reserve = itertools.count()
        self.clears = 0

    def append(self, key: int, value: int, tag: Tag) -> tuple[int | None, bool]:
        """Returns ``(slot, filled_last)``; slot is None when the buffer is full."""
        slot = next(self._reserve)
        if slot >= self.capacity:
            return None, False
        entries = self.entries
        entries[slot] = (key, value, tag)
        # Commit in slot order so entries below ``commit`` are all written.
        while self.commit != slot:
            time.sleep(0)
        self.commit = slot + 1
        if slot == self.capacity - 1:
            self.sealed = True
            return slot, True
        return slot, False

    def lookup(self, key: int) -> tuple[int, int, Tag] | None:
        """Newest committed entry for ``key``."""
        entries = self.entries
        for i in range(self.commit - 1, -1, -1):
            e = entries[i]
            if e is not None and e[0] == key:
                return e
        return None

    def snapshot(self) -> tuple[tuple[int, int, Tag], ...]:
        entries = self.entries
        return tuple(e for e in entries[: self.commit] if e is not None)

    def seal(self) -> tuple[tuple[int, int, Tag], ...]:
        """Close a partially filled buffer so it can be shipped as a patch.

        Only safe when no appender is active on this buffer.
        """
        self._reserve = itertools.count(self.capacity)
        self.sealed = True
        return self.snapshot()

    def clear(self) -> None:
        self.entries = [None] * self.capacity
        self.commit = 0
        self._reserve = itertools.count()
        self.sealed = False
        self.clears += 1

    def __len__(self) -> int:
        return self.commit


def buffer_append(buffer: InsertBuffer, key: int, value: int, tag: Tag) -> tuple[int | None, bool]:
    return buffer.append(key, value, tag)


def buffer_lookup(buffer: InsertBuffer, key: int) -> tuple[int, int, Tag] | None:
    return buffer.lookup(key)


# -- hot cache -------------------------------------------------------------


class Miss:
    __slots__ = ()

    def __repr__(self) -> str:
        return "MISS"


MISS = Miss()


class HotCache:
    """96-entry cache in 24 four-way buckets, guarded by a 256-bit bloom filter."""

    def __init__(self, seed: int | None = None) -> None:
        self.bloom = 0
        self.buckets: list[list[tuple[int, int, int] | None]] = [
            [None] * CACHE_WAYS for _ in range(CACHE_BUCKETS)
        ]
        self.insert_count = 0
        self.rebuilds = 0
        self.bucket_reads = 0
        self._rng = random.Random(seed)

    @staticmethod
    def _mask(hint: CacheHint) -> int:
        b0, b1, b2 = hint.bloom
        return (1 << b0) | (1 << b1) | (1 << b2)

    def bloom_test(self, hint: CacheHint) -> bool:
        m = self._mask(hint)
        return self.bloom & m == m

    def lookup(self, key: int, hint: CacheHint, rec: AccessRecorder | None = None):
        m = self._mask(hint)
        if self.bloom & m != m:
            return MISS
        self.bucket_reads += 1
        if rec is not None:
            rec.record(L1, 1)
            rec.event("cache_bucket_reads")
        for e in self.buckets[hint.bucket]:
            if e is not None and e[0] == key:
                return e[1]
        return MISS

    def admit(self, key: int, value: int, hint: CacheHint) -> None:
        bucket = self.buckets[hint.bucket]
        m = self._mask(hint)
        entry = (key, value, m)
        free = None
        for i, e in enumerate(bucket):
            if e is None:
                if free is None:
                    free = i
            elif e[0] == key:
                bucket[i] = entry
                return
        if free is None:
            free = self._rng.randrange(CACHE_WAYS)
        bucket[free] = entry
        self.bloom |= m
        self.insert_count += 1
        if self.insert_count > 4 * CACHE_CAPACITY:
            self.rebuild()

    def invalidate(self, key: int, hint: CacheHint) -> bool:
        bucket = self.buckets[hint.bucket]
        for i, e in enumerate(bucket):
            if e is not None and e[0] == key:
                bucket[i] = None
                return True
        return False

    def rebuild(self) -> None:
        bloom = 0
        for bucket in self.buckets:
            for e in bucket:
                if e is not None:
                    bloom |= e[2]
        self.bloom = bloom
        self.insert_count = 0
        self.rebuilds += 1

    def resident(self) -> list[tuple[int, int]]:
        return [(e[0], e[1]) for b in self.buckets for e in b if e is not None]


def cache_lookup(cache: HotCache, key: int, hint: CacheHint):
    return cache.lookup(key, hint)


def cache_admit(cache: HotCache, key: int, value: int, hint: CacheHint) -> None:
    cache.admit(key, value, hint)


def cache_invalidate(cache: HotCache, key: int, hint: CacheHint | None = None) -> bool:
    return cache.invalidate(key, hint or hint_for_key(key))


# -- epochs ----------------------------------------------------------------


class EpochState:
    """Per-thread incoming/outgoing request counters and a retire list.

    A reader bumps ``incoming`` before its first pointer read and
    ``outgoing`` after its last. An object retired after being unlinked is
    freed once every thread's outgoing count has reached the incoming count
    snapshotted at retirement: any request that could have seen the object
    had already started by then, and has now finished.
    """

    def __init__(self, slots: int, free: Callable[[object], None]) -> None:
        self.incoming = [0] * slots
        self.outgoing = [0] * slots
        self.retired: list[tuple[object, tuple[int, ...]]] = []
        self._free = free
        self._lock = threading.Lock()
        self.freed = 0

    def enter(self, tid: int) -> None:
        self.incoming[tid] += 1

    def exit(self, tid: int) -> None:
        self.outgoing[tid] += 1

    def retire(self, obj: object) -> None:
        snap = tuple(self.incoming)
        with self._lock:
            self.retired.append((obj, snap))

    def collect(self) -> int:
        out = self.outgoing
        with self._lock:
            keep = []
            ready = []
            for obj, snap in self.retired:
                if all(o >= s for o, s in zip(out, snap)):
                    ready.append(obj)
                else:
                    keep.append((obj, snap))
            self.retired = keep
        for obj in ready:
            self._free(obj)
        self.freed += len(ready)
        return len(ready)

    def pending(self) -> int:
        return len(self.retired)


def epoch_retire(state: EpochState, obj: object) -> None:
    state.retire(obj)


def epoch_collect(state: EpochState) -> int:
    return state.collect()


# -- engine ----------------------------------------------------------------


@dataclass(frozen=True)
class PatchRequest:
    leaf_uid: int
    entries: tuple[tuple[int, int, Tag], ...]
    traverser: int


@dataclass
class EngineConfig:
    threads: int = 8
    buffer_capacity: int = DEFAULT_BUFFER_CAPACITY
    cache_enabled: bool = True
    eps: EpsilonConfig = field(default_factory=EpsilonConfig)
    instrument: bool = True
    latency: LatencyConstants = BF3
    inject_latency: bool = False
    root_cached: bool = False
    extra_epoch_slots: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")


@dataclass
class ContextStats:
    requests: int = 0
    cache_lookups: int = 0
    cache_hits: int = 0
    buffer_hits: int = 0
    retries: int = 0
    patches_emitted: int = 0
    leaf_descents: int = 0


class TraverserContext:
    def __init__(self, engine: "NicEngine", tid: int) -> None:
        cfg = engine.config
        self.engine = engine
        self.tid = tid
        self.cache = HotCache(seed=cfg.seed * 1_000_003 + tid)
        self.rec = AccessRecorder(
            cfg.instrument, constants=cfg.latency, inject_latency=cfg.inject_latency
        )
        self.stats = ContextStats()

    def handle(self, req: Request) -> list[Response]:
        op = req.op
        if op is Op.GET:
            return [self.handle_get(req)]
        if op is Op.RANGE:
            return self.handle_range(req)
        if op is Op.PING:
            self.stats.requests += 1
            return [Response(Op.PING, Status.OK, req.request_id, req.key)]
        return [self.handle_write(req)]

    def _leaf(self, key: int) -> tuple[LeafNode, int | None]:
        e = self.engine
        self.stats.leaf_descents += 1
        self.rec.event("leaf_descents")
        leaf, bound = find_leaf(
            e.memory, key, e.config.eps.eps_inner, e.config.eps.infinite_mode, self.rec, e.config.root_cached
        )
        self.rec.record(DEV, 1)  # leaf metadata and model line
        return leaf, bound

    def handle_get(self, req: Request) -> Response:
        e = self.engine
        epochs = e.epochs
        tid = self.tid
        key = req.key
        hint = req.hint if e.config.cache_enabled else None
        self.stats.requests += 1
        epochs.enter(tid)
        try:
            if hint is not None:
                self.stats.cache_lookups += 1
                v = self.cache.lookup(key, hint, self.rec)
                if v is not MISS:
                    self.stats.cache_hits += 1
                    return Response(Op.GET, Status.OK, req.request_id, key, v, flags=req_flags(req))
            leaf, _ = self._leaf(key)
            buf = leaf.buffer
            hit = buf.lookup(key)
            self.rec.record(DEV, _buffer_lines(buf.commit))
            if hit is not None:
                self.stats.buffer_hits += 1
                if hit[2] is Tag.DELETE:
                    return Response(Op.GET, Status.NOT_FOUND, req.request_id, key, flags=req_flags(req))
                value = hit[1]
            else:
                slot = leaf_locate(leaf, key, e.config.eps.eps_leaf, e.config.eps.infinite_mode, self.rec)
                if slot is None:
                    return Response(Op.GET, Status.NOT_FOUND, req.request_id, key, flags=req_flags(req))
                vals = leaf.values_ref
                if vals is None or vals.poisoned:
                    raise PoisonedRead(f"value array of leaf uid {leaf.uid} was reclaimed")
                self.rec.record(AccessClass.HOST_DMA, 1)
                value = vals.data[slot]
            if leaf.poisoned:
                raise PoisonedRead(f"leaf uid {leaf.uid} reclaimed during GET")
            if hint is not None:
                self.cache.admit(key, value, hint)
            return Response(Op.GET, Status.OK, req.request_id, key, value, flags=req_flags(req))
        finally:
            epochs.exit(tid)
            self.rec.request_boundary()

    def handle_write(self, req: Request) -> Response:
        e = self.engine
        tid = self.tid
        key = req.key
        tag = OP_TAG[req.op]
        self.stats.requests += 1
        e.epochs.enter(tid)
        try:
            leaf, _ = self._leaf(key)
            slot, last = leaf.buffer.append(key, req.value if tag is not Tag.DELETE else 0, tag)
            self.rec.record(DEV, 1)
            if slot is None:
                self.stats.retries += 1
                return Response(req.op, Status.RETRY, req.request_id, key, flags=req_flags(req))
            if e.config.cache_enabled:
                self.cache.invalidate(key, req.hint or hint_for_key(key))
            if last:
                self.stats.patches_emitted += 1
                e.emit_patch(PatchRequest(leaf.uid, leaf.buffer.snapshot(), tid))
            return Response(req.op, Status.OK, req.request_id, key, flags=req_flags(req))
        finally:
            e.epochs.exit(tid)
            self.rec.request_boundary()

    def handle_range(self, req: Request) -> list[Response]:
        e = self.engine
        tid = self.tid
        eps = e.config.eps
        remaining = req.max_count
        pairs: list[tuple[int, int]] = []
        self.stats.requests += 1
        e.epochs.enter(tid)
        try:
            key = req.key
            while remaining > 0:
                leaf, bound = self._leaf(key)
                got = _leaf_range(leaf, key, bound, remaining, eps.eps_leaf, eps.infinite_mode, self.rec)
                pairs.extend(got)
                remaining -= len(got)
                if bound is None:
                    break
                key = bound
        finally:
            e.epochs.exit(tid)
            self.rec.request_boundary()
        return range_fragments(req, pairs)


def req_flags(req: Request) -> int:
    return 1 if req.hint is not None else 0


def _buffer_lines(committed: int) -> int:
    # Committed entries beyond the header line, 24 bytes each.
    return -(-committed * 24 // 64)


def _leaf_range(
    leaf: LeafNode,
    key: int,
    bound: int | None,
    limit: int,
    eps: int,
    infinite: bool,
    rec: AccessRecorder,
) -> list[tuple[int, int]]:
    """Pairs with ``key <= k < bound`` from one leaf, buffer merged, ascending."""
    buf = leaf.buffer
    entries = buf.snapshot()
    rec.record(DEV, _buffer_lines(len(entries)))
    latest: dict[int, tuple[int, Tag]] = {}
    for k, v, tag in entries:
        if k >= key and (bound is None or k < bound):
            latest[k] = (v, tag)
    merged: dict[int, int] = {}
    n = leaf.key_count
    if n:
        start = leaf_lower_bound(leaf, key, eps, infinite, rec)
        keys = leaf.keys_ref.data if leaf.keys_ref is not None else None
        vals = leaf.values_ref
        if keys is None or vals is None or vals.poisoned:
            raise PoisonedRead(f"host arrays of leaf uid {leaf.uid} were reclaimed")
        if start < n:
            rec.record(AccessClass.HOST_DMA, 1)  # value run
            data = vals.data
            # Only as many leaf keys as could survive the limit after deletes.
            stop = min(n, start + limit + len(latest))
            for i in range(start, stop):
                k = keys[i]
                if bound is not None and k >= bound:
                    break
                merged[k] = data[i]
    if leaf.poisoned:
        raise PoisonedRead(f"leaf uid {leaf.uid} reclaimed during RANGE")
    for k, (v, tag) in latest.items():
        if tag is Tag.DELETE:
            merged.pop(k, None)
        else:
            merged[k] = v
    return sorted(merged.items())[:limit]


def range_fragments(req: Request, pairs: list[tuple[int, int]]) -> list[Response]:
    """Split RANGE results into packets of at most 64 pairs; the last is END_OF_RANGE."""
    chunks = [pairs[i : i + MAX_RANGE_PAIRS] for i in range(0, len(pairs), MAX_RANGE_PAIRS)] or [[]]
    out = []
    for i, chunk in enumerate(chunks):
        status = Status.END_OF_RANGE if i == len(chunks) - 1 else Status.OK
        out.append(Response(Op.RANGE, status, req.request_id, req.key, pairs=tuple(chunk), fragment=i, flags=req_flags(req)))
    return out


class NicEngine:
    """Device memory, traverser contexts, epochs and the patch channel."""

    def __init__(self, config: EngineConfig | None = None, memory: DeviceMemory | None = None) -> None:
        self.config = config or EngineConfig()
        self.memory = memory or DeviceMemory()
        self.epochs = EpochState(self.config.threads + self.config.extra_epoch_slots, self._free)
        self.contexts = [TraverserContext(self, i) for i in range(self.config.threads)]
        self.patches: queue.Queue[PatchRequest] = queue.Queue()
        self.patch_sink: Callable[[PatchRequest], None] | None = None

    def _free(self, obj: object) -> None:
        if isinstance(obj, HostArray):
            obj.poison()
        else:
            self.memory.free(obj)

    def emit_patch(self, patch: PatchRequest) -> None:
        if self.patch_sink is not None:
            self.patch_sink(patch)
        else:
            self.patches.put(patch)

    def flush_buffers(self) -> int:
        """Emit patches for every live, non-empty, unsealed buffer (quiescent use only)."""
        n = 0
        for node in list(self.memory.nodes.values()):
            if isinstance(node, LeafNode) and not node.retired and not node.poisoned:
                buf = node.buffer
                if buf.commit and not buf.sealed:
                    self.emit_patch(PatchRequest(node.uid, buf.seal(), -1))
                    n += 1
        return n

    def new_buffer(self) -> InsertBuffer:
        return InsertBuffer(self.config.buffer_capacity)

    def context_for(self, tid: int) -> TraverserContext:
        return self.contexts[tid]

    def in_flight_capacity(self) -> int:
        return self.config.threads * RECEIVE_QUEUE_DEPTH

    def access_report(self) -> dict:
        total = AccessRecorder(True, constants=self.config.latency)
        for ctx in self.contexts:
            total.total.merge(ctx.rec.total)
            total.requests += ctx.rec.requests
            total.modeled_us += ctx.rec.modeled_us
        return total.report()

    def cache_stats(self) -> tuple[int, int]:
        lookups = sum(c.stats.cache_lookups for c in self.contexts)
        hits = sum(c.stats.cache_hits for c in self.contexts)
        return hits, lookups
