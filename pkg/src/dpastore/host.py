"""Host-domain tree replica and structural maintenance.

The host keeps a full replica of the index (values included) and turns
sealed insert buffers into stitch commands. An update-only patch writes
values in place; any other patch merges the buffer into the leaf, retrains
it, and when the result no longer fits one leaf model splits it into leaves
capped by the retrain bound. Replacements propagate upward one level at a
time: a parent absorbs a single replacement with one CONNECT, otherwise it
is rebuilt and itself replaced. A change that reaches the root installs a
new root behind a fence.

Locking: a patch locks the parent it modifies, and when that parent must be
replaced it takes the grandparent's lock before releasing the parent's, so
at most two node locks are held at once and acquisition always moves up.
"""

from __future__ import annotations

import itertools
import logging
import math
import queue
import threading
import time
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .engine import InsertBuffer, PatchRequest, Tag
from .nodes import LEAF_CAPACITY, MAX_SEGMENTS, SEGMENT_CAPACITY, HostArray, InnerNode, LeafNode, NodeRef
from .pla import EpsilonConfig, train_segments
from .stitch import ALL_QUEUES, ROOT_UID, StitchCommand, clear_buffer, connect, copy, fence, root_split_plan

log = logging.getLogger(__name__)

Batch = list[tuple[int, StitchCommand]]


@dataclass(frozen=True)
class RetrainPolicy:
    leaf_capacity: int = LEAF_CAPACITY
    retrain_bound_fraction: float = 0.25
    eps: EpsilonConfig = field(default_factory=EpsilonConfig)

    def __post_init__(self) -> None:
        if not 1 <= self.leaf_capacity <= LEAF_CAPACITY:
            raise ValueError(f"leaf_capacity must be in 1..{LEAF_CAPACITY}")
        if not 0 < self.retrain_bound_fraction <= 1:
            raise ValueError("retrain_bound_fraction must be in (0, 1]")

    @property
    def split_leaf_cap(self) -> int:
        return max(1, math.ceil(self.retrain_bound_fraction * self.leaf_capacity))


class HostLeaf:
    __slots__ = ("uid", "handle", "lo", "partition", "model", "keys", "values", "replaced")
    level = 0

    def __init__(self, uid, handle, lo, partition, model, keys: HostArray, values: HostArray) -> None:
        self.uid = uid
        self.handle = handle
        self.lo = lo
        self.partition = partition
        self.model = model
        self.keys = keys
        self.values = values
        self.replaced = False


class HostInner:
    __slots__ = (
        "uid", "handle", "lo", "partition", "level", "pivots", "children",
        "seg_starts", "segments", "lock", "replaced",
    )

    def __init__(self, uid, handle, lo, partition, level, pivots, children, seg_starts, segments) -> None:
        self.uid = uid
        self.handle = handle
        self.lo = lo
        self.partition = partition
        self.level = level
        self.pivots = pivots
        self.children = children
        self.seg_starts = seg_starts
        self.segments = segments
        self.lock = threading.Lock()
        self.replaced = False

    def child_for(self, key: int):
        i = bisect_right(self.pivots, key) - 1
        return self.children[i if i > 0 else 0]

    def slot_of(self, i: int) -> tuple[int, int]:
        s = bisect_right(self.seg_starts, i) - 1
        return s, i - self.seg_starts[s]

    def index_of(self, child) -> int:
        for i, c in enumerate(self.children):
            if c is child:
                return i
        return -1


HostNode = HostLeaf | HostInner


def merge_leaf(
    keys: Sequence[int], values: Sequence[int], entries: Iterable[tuple[int, int, Tag]]
) -> tuple[list[int], list[int]]:
    """Apply buffer entries (commit order) to sorted leaf contents; newest wins."""
    merged = dict(zip(keys, values))
    for k, v, tag in entries:
        if tag is Tag.DELETE:
            merged.pop(k, None)
        else:
            merged[k] = v
    out_keys = sorted(merged)
    return out_keys, [merged[k] for k in out_keys]


def balanced_groups(count: int, max_per_group: int) -> list[int]:
    """Split ``count`` items into the fewest groups of at most ``max_per_group``, sizes balanced."""
    groups = -(-count // max_per_group)
    q, r = divmod(count, groups)
    return [q + 1] * r + [q] * (groups - r)


@dataclass
class HostStats:
    patches: int = 0
    update_only: int = 0
    leaf_replacements: int = 0
    leaf_splits: int = 0
    inner_rebuilds: int = 0
    root_installs: int = 0
    re_resolved: int = 0
    split_leaf_sizes: list[int] = field(default_factory=list)
    split_inner_segments: list[int] = field(default_factory=list)


class HostTree:
    def __init__(
        self,
        policy: RetrainPolicy | None = None,
        partitions: int = 4,
        buffer_capacity: int = 16,
        submit: Callable[[Batch], None] | None = None,
    ) -> None:
        self.policy = policy or RetrainPolicy()
        self.partitions = partitions
        self.buffer_capacity = buffer_capacity
        self.submit = submit or (lambda batch: None)
        self.root: HostInner | None = None
        self.root_lock = threading.Lock()
        self.nodes: dict[int, HostNode] = {}
        self._uids = itertools.count(1)
        self._handles = itertools.count(0x1000)
        self._barriers = itertools.count(1)
        self._lock = threading.Lock()
        self.stats = HostStats()
        self.faults: list[str] = []

    # -- construction helpers ------------------------------------------

    def _ids(self) -> tuple[int, int]:
        with self._lock:
            return next(self._uids), next(self._handles)

    def _register(self, node: HostNode) -> HostNode:
        self.nodes[node.uid] = node
        return node

    def _make_leaves(self, keys: list[int], values: list[int], max_len: int, lo: int, partition: int) -> list[HostLeaf]:
        eps = self.policy.eps
        if not keys:
            uid, handle = self._ids()
            return [self._register(HostLeaf(uid, handle, lo, partition, None, HostArray(handle, []), HostArray(handle, [])))]
        segs = train_segments(keys, eps.eps_leaf, max_len=max_len, infinite_mode=eps.infinite_mode)
        out = []
        for i, (start, seg) in enumerate(segs):
            end = start + seg.covered_count
            uid, handle = self._ids()
            leaf = HostLeaf(
                uid, handle, lo if i == 0 else keys[start], partition, seg,
                HostArray(handle, keys[start:end]), HostArray(handle, values[start:end]),
            )
            out.append(self._register(leaf))
        return out

    def _make_inner(self, pivots: list[int], children: list[HostNode], level: int, lo: int, partition: int) -> list[HostInner]:
        eps = self.policy.eps
        segs = train_segments(pivots, eps.eps_inner, max_len=SEGMENT_CAPACITY, infinite_mode=eps.infinite_mode)
        out = []
        g = 0
        for size in balanced_groups(len(segs), MAX_SEGMENTS):
            group = segs[g : g + size]
            g += size
            base = group[0][0]
            stop = group[-1][0] + group[-1][1].covered_count
            uid, handle = self._ids()
            node = HostInner(
                uid, handle, lo if not out else pivots[base], partition, level,
                pivots[base:stop], children[base:stop],
                [start - base for start, _ in group], [seg for _, seg in group],
            )
            out.append(self._register(node))
        return out

    def _payload(self, node: HostNode, empty_refs: bool = False) -> InnerNode | LeafNode:
        if isinstance(node, HostLeaf):
            return LeafNode(node.uid, node.handle, node.model, node.keys, node.values, InsertBuffer(self.buffer_capacity))
        pivs, refs = [], []
        bounds = node.seg_starts + [len(node.pivots)]
        for s in range(len(node.segments)):
            a, b = bounds[s], bounds[s + 1]
            pivs.append(node.pivots[a:b])
            refs.append([NodeRef() if empty_refs else NodeRef(c.uid, c.handle) for c in node.children[a:b]])
        return InnerNode(node.uid, node.handle, node.level, node.segments, pivs, refs)

    @staticmethod
    def _set_partition(node: HostNode, p: int) -> None:
        stack = [node]
        while stack:
            n = stack.pop()
            n.partition = p
            if isinstance(n, HostInner):
                stack.extend(n.children)

    # -- bulk load -----------------------------------------------------

    def bulk_load(self, keys: Sequence[int], values: Sequence[int]) -> Batch:
        """Build the replica bottom-up and return (and submit) the full stitch stream."""
        if self.root is not None:
            raise RuntimeError("bulk_load on a non-empty tree")
        keys = list(keys)
        values = list(values)
        if len(keys) != len(values):
            raise ValueError("keys and values differ in length")
        level_nodes: list[HostNode] = self._make_leaves(keys, values, self.policy.leaf_capacity, 0, 0)
        level = 0
        while True:
            level += 1
            level_nodes = self._make_inner([n.lo for n in level_nodes], level_nodes, level, 0, 0)
            if len(level_nodes) == 1:
                break
        root = level_nodes[0]
        tops = root.children
        copies = []
        for i, top in enumerate(tops):
            self._set_partition(top, i % self.partitions)
            copies.append([copy(self._payload(n)) for n in self._post_order(top) if n is not top])
        root.partition = 0
        plan = root_split_plan(
            [self._payload(t) for t in tops], self._payload(root, empty_refs=True),
            self.partitions, next(self._barriers), copies=copies,
        )
        with self.root_lock:
            self.root = root
            self.submit(plan)
        self.stats.root_installs += 1
        return plan

    @staticmethod
    def _post_order(node: HostNode) -> list[HostNode]:
        out = []
        stack = [(node, False)]
        while stack:
            n, done = stack.pop()
            if done or isinstance(n, HostLeaf):
                out.append(n)
                continue
            stack.append((n, True))
            stack.extend((c, False) for c in reversed(n.children))
        return out

    # -- lookups (host side) -------------------------------------------

    def find_leaf(self, key: int) -> HostLeaf:
        node = self.root
        while isinstance(node, HostInner):
            node = node.child_for(key)
        return node

    def get(self, key: int) -> int | None:
        leaf = self.find_leaf(key)
        keys = leaf.keys.data
        i = bisect_right(keys, key) - 1
        return leaf.values.data[i] if i >= 0 and keys[i] == key else None

    def leaves(self) -> list[HostLeaf]:
        return [n for n in self._post_order(self.root) if isinstance(n, HostLeaf)]

    def items(self) -> list[tuple[int, int]]:
        out = []
        for leaf in self.leaves():
            out.extend(zip(leaf.keys.data, leaf.values.data))
        return out

    def depth(self) -> int:
        return self.root.level + 1

    # -- patching ------------------------------------------------------

    def apply_patch(self, patch: PatchRequest) -> Batch:
        """Turn one sealed buffer into stitch commands; returns what was submitted."""
        self.stats.patches += 1
        leaf = self.nodes.get(patch.leaf_uid)
        if not isinstance(leaf, HostLeaf) or leaf.replaced:
            if not patch.entries:
                return []
            # Raced by another patch: descend for the buffered keys' leaf.
            self.stats.re_resolved += 1
            leaf = self.find_leaf(min(k for k, _, _ in patch.entries))
            if leaf is None:
                self._fault(f"patch for uid {patch.leaf_uid} cannot be resolved")
                return []
        keys = leaf.keys.data
        if all(tag is Tag.UPDATE for _, _, tag in patch.entries):
            slots = []
            for k, v, _ in patch.entries:
                i = bisect_right(keys, k) - 1
                if i < 0 or keys[i] != k:
                    break
                slots.append((i, v))
            else:
                vals = leaf.values.data
                for i, v in slots:
                    vals[i] = v
                self.stats.update_only += 1
                batch = [(leaf.partition, clear_buffer(patch.leaf_uid))]
                self.submit(batch)
                return batch
        mkeys, mvals = merge_leaf(keys, leaf.values.data, patch.entries)
        new = self._make_leaves(mkeys, mvals, self.policy.leaf_capacity, leaf.lo, leaf.partition)
        if len(new) > 1:
            for n in new:
                del self.nodes[n.uid]
            new = self._make_leaves(mkeys, mvals, self.policy.split_leaf_cap, leaf.lo, leaf.partition)
            self.stats.leaf_splits += 1
            self.stats.split_leaf_sizes.extend(len(n.keys.data) for n in new)
        else:
            self.stats.leaf_replacements += 1
        retire = [leaf.uid, leaf.keys, leaf.values]
        return self._install(leaf, new, retire, [clear_buffer(patch.leaf_uid)])

    def _lock_parent(self, x: HostNode, owned: bool = False) -> HostInner | None:
        """Lock and return ``x``'s current parent; None (with root_lock held) if ``x`` is the root.

        ``owned`` means the caller itself marked ``x`` replaced and is
        installing its successor, so the flag is expected.
        """
        while True:
            if self.root is x:
                self.root_lock.acquire()
                if self.root is x:
                    return None
                self.root_lock.release()
                continue
            node = self.root
            while isinstance(node, HostInner) and node.level > x.level + 1:
                node = node.child_for(x.lo)
            if isinstance(node, HostInner) and node.level == x.level + 1:
                node.lock.acquire()
                if not node.replaced and node.index_of(x) >= 0:
                    return node
                node.lock.release()
            if x.replaced and not owned:
                raise RuntimeError(f"uid {x.uid} was replaced underneath its patch")
            time.sleep(0)

    def _install(self, x: HostNode, repl: list[HostNode], retire: list, tail: list[StitchCommand]) -> Batch:
        """Replace ``x`` by the fresh nodes ``repl``, rebuilding ancestors as needed.

        ``tail`` commands follow the final CONNECT on its queue, so they
        cannot overtake it.
        """
        batch: Batch = []
        held: threading.Lock | None = None
        owned = False
        try:
            while True:
                parent = self._lock_parent(x, owned)
                if held is not None:
                    held.release()
                held = self.root_lock if parent is None else parent.lock
                if parent is None:
                    more, root = self._install_root(x, repl, retire)
                    batch.extend(more)
                    batch.extend((0, c) for c in tail)
                    self.submit(batch)
                    self._retire_replica(x)
                    self.root = root
                    return batch
                batch.extend((r.partition, copy(self._payload(r))) for r in repl)
                i = parent.index_of(x)
                if len(repl) == 1:
                    batch.append((parent.partition, connect(parent.uid, parent.slot_of(i), repl[0], retire)))
                    batch.extend((parent.partition, c) for c in tail)
                    self.submit(batch)
                    parent.children[i] = repl[0]
                    self._retire_replica(x)
                    return batch
                pivots = parent.pivots[:i] + [r.lo for r in repl] + parent.pivots[i + 1 :]
                children = parent.children[:i] + repl + parent.children[i + 1 :]
                pieces = self._make_inner(pivots, children, parent.level, parent.lo, parent.partition)
                self.stats.inner_rebuilds += 1
                if len(pieces) > 1:
                    self.stats.split_inner_segments.extend(len(p.segments) for p in pieces)
                parent.replaced = True
                self._retire_replica(x)
                retire = retire + [parent.uid]
                x, repl, owned = parent, pieces, True
        finally:
            if held is not None:
                held.release()

    def _install_root(self, old: HostInner, repl: list[HostNode], retire: list) -> tuple[Batch, HostInner]:
        """Commands installing a new root in place of ``old``; caller holds root_lock."""
        self.stats.root_installs += 1
        if old.uid not in retire:
            retire = retire + [old.uid]
        if len(repl) == 1:
            root = repl[0]
            root.partition = 0
            return [
                (0, copy(self._payload(root))),
                (ALL_QUEUES, fence(next(self._barriers))),
                (0, connect(ROOT_UID, (0, 0), root, retire)),
            ], root
        fresh = {n.uid for n in repl}
        level = repl
        while True:
            for i, n in enumerate(level):
                self._set_fresh_partition(n, i % self.partitions, fresh)
            parents = self._make_inner([n.lo for n in level], level, level[0].level + 1, old.lo, 0)
            if len(parents) == 1:
                break
            fresh.update(n.uid for n in parents)
            level = parents
        root = parents[0]
        copies = [[copy(self._payload(n)) for n in self._fresh_below(t, fresh)] for t in level]
        plan = root_split_plan(
            [self._payload(t) for t in level], self._payload(root, empty_refs=True),
            self.partitions, next(self._barriers), retire, copies,
        )
        return plan, root

    @staticmethod
    def _fresh_below(top: HostNode, fresh: set[int]) -> list[HostNode]:
        """Fresh strict descendants of ``top``, children before parents."""
        out = []
        stack = [(c, False) for c in reversed(top.children)] if isinstance(top, HostInner) else []
        while stack:
            n, done = stack.pop()
            if n.uid not in fresh:
                continue
            if done or isinstance(n, HostLeaf):
                out.append(n)
                continue
            stack.append((n, True))
            stack.extend((c, False) for c in reversed(n.children))
        return out

    @classmethod
    def _set_fresh_partition(cls, node: HostNode, p: int, fresh: set[int]) -> None:
        node.partition = p
        for n in cls._fresh_below(node, fresh):
            n.partition = p

    def _retire_replica(self, node: HostNode) -> None:
        node.replaced = True
        self.nodes.pop(node.uid, None)

    def _fault(self, msg: str) -> None:
        log.error("host protocol fault: %s", msg)
        self.faults.append(msg)


class PatcherPool:
    """Worker threads draining the shared patch queue into ``tree.apply_patch``."""

    def __init__(self, tree: HostTree, count: int = 4) -> None:
        if count < 1:
            raise ValueError("patcher count must be >= 1")
        self.tree = tree
        self.count = count
        self.queue: queue.Queue[PatchRequest | None] = queue.Queue()
        self._threads: list[threading.Thread] = []

    def put(self, patch: PatchRequest) -> None:
        self.queue.put(patch)

    def start(self) -> None:
        for i in range(self.count):
            t = threading.Thread(target=self._run, name=f"patcher-{i}", daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        for _ in self._threads:
            self.queue.put(None)
        for t in self._threads:
            t.join(timeout=5)
        self._threads.clear()

    def wait_idle(self) -> None:
        self.queue.join()

    def run_pending(self) -> int:
        """Apply queued patches on the calling thread (no workers running)."""
        n = 0
        while True:
            try:
                patch = self.queue.get_nowait()
            except queue.Empty:
                return n
            try:
                if patch is not None:
                    self.tree.apply_patch(patch)
                    n += 1
            finally:
                self.queue.task_done()

    def _run(self) -> None:
        while True:
            patch = self.queue.get()
            try:
                if patch is None:
                    return
                self.tree.apply_patch(patch)
            except Exception as exc:
                log.exception("patch for leaf uid %s failed", patch.leaf_uid)
                self.tree._fault(f"patch {patch.leaf_uid}: {exc!r}")
            finally:
                self.queue.task_done()
