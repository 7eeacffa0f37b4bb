"""Host-to-device stitch channel.

The host describes every structural change as a stream of commands:

* ``COPY`` installs an immutable node payload and registers its uid;
* ``CONNECT`` swaps one child reference (or the root reference) to a node;
* ``CLEAR_BUFFER`` resets a leaf's insert buffer;
* ``FENCE`` is a barrier across all queues.

Commands travel on per-partition queues, each drained by one worker.
Ordering across queues is recovered on the device side: a CONNECT whose
parent is unknown, or whose child subtree is not fully present yet, is
deferred and retried after later commands land. A CONNECT into a parent that
has already been replaced is skipped, because the replacement was built from
a host replica that already contained the change.
"""

from __future__ import annotations

import dataclasses
import enum
import itertools
import logging
import random
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .engine import NicEngine
from .nodes import DeviceMemory, HostArray, InnerNode, LeafNode

log = logging.getLogger(__name__)

ROOT_UID = DeviceMemory.ROOT_UID
ALL_QUEUES = -1


class Kind(enum.Enum):
    COPY = "copy"
    CONNECT = "connect"
    CLEAR_BUFFER = "clear_buffer"
    FENCE = "fence"


@dataclass(frozen=True)
class StitchCommand:
    kind: Kind
    node: InnerNode | LeafNode | None = None
    parent_uid: int = ROOT_UID
    slot: tuple[int, int] = (0, 0)
    child_uid: int = 0
    child_handle: int = 0
    leaf_uid: int = 0
    barrier: int = 0
    retire: tuple = ()
    seq: int = -1

    @property
    def uid(self) -> int:
        return self.node.uid if self.node is not None else 0

    def nbytes(self) -> int:
        if self.kind is Kind.COPY:
            return self.node.device_bytes()
        if self.kind is Kind.CONNECT:
            return 32
        if self.kind is Kind.CLEAR_BUFFER:
            return 16
        return 8


def copy(node: InnerNode | LeafNode) -> StitchCommand:
    return StitchCommand(Kind.COPY, node=node)


def connect(
    parent_uid: int,
    slot: tuple[int, int],
    child: InnerNode | LeafNode,
    retire: Iterable = (),
) -> StitchCommand:
    """Point ``parent``'s child slot (or the root when ``parent_uid`` is 0) at ``child``.

    ``retire`` lists what becomes unreachable by this swap: node uids (ints)
    and host arrays.
    """
    return StitchCommand(
        Kind.CONNECT,
        parent_uid=parent_uid,
        slot=slot,
        child_uid=child.uid,
        child_handle=child.handle,
        retire=tuple(retire),
    )


def clear_buffer(leaf_uid: int) -> StitchCommand:
    return StitchCommand(Kind.CLEAR_BUFFER, leaf_uid=leaf_uid)


def fence(barrier: int) -> StitchCommand:
    return StitchCommand(Kind.FENCE, barrier=barrier)


def partition_of(top_level_index: int, partition_count: int) -> int:
    if partition_count < 1:
        raise ValueError("partition_count must be >= 1")
    return top_level_index % partition_count


def root_split_plan(
    top_nodes: Sequence[InnerNode | LeafNode],
    root: InnerNode,
    partition_count: int,
    barrier: int,
    retire: Iterable = (),
    copies: Sequence[Sequence[StitchCommand]] | None = None,
) -> list[tuple[int, StitchCommand]]:
    """Commands installing ``root`` over ``top_nodes``, spread across partitions.

    Top node ``i`` (and, if given, the extra commands ``copies[i]`` building
    its subtree) goes to partition ``i mod S``. The root's COPY and its slot
    CONNECTs go to partition 0, then a fence spans all queues, then the root
    reference is swapped.
    """
    plan: list[tuple[int, StitchCommand]] = []
    for i, top in enumerate(top_nodes):
        q = partition_of(i, partition_count)
        if copies is not None:
            plan.extend((q, c) for c in copies[i])
        plan.append((q, copy(top)))
    plan.append((0, copy(root)))
    i = 0
    for s in range(root.segment_count):
        for j in range(root.pivot_counts[s]):
            plan.append((0, connect(root.uid, (s, j), top_nodes[i])))
            i += 1
    plan.append((ALL_QUEUES, fence(barrier)))
    plan.append((0, connect(ROOT_UID, (0, 0), root, retire)))
    return plan


class ProtocolFault(RuntimeError):
    pass


class StitcherQueue:
    def __init__(self, partition: int, capacity: int | None = None) -> None:
        self.partition = partition
        self.capacity = capacity
        self.items: deque[StitchCommand] = deque()
        self.deferred: list[StitchCommand] = []
        self._seq = itertools.count()
        self.last_applied_seq = -1
        self.stalls = 0
        self.cond = threading.Condition()
        self.delay_s = 0.0

    def put(self, cmd: StitchCommand) -> StitchCommand:
        with self.cond:
            if self.capacity is not None and len(self.items) >= self.capacity:
                self.stalls += 1
                while len(self.items) >= self.capacity:
                    self.cond.wait(0.05)
            cmd = dataclasses.replace(cmd, seq=next(self._seq))
            self.items.append(cmd)
            self.cond.notify_all()
        return cmd

    def __len__(self) -> int:
        return len(self.items)


class StitchEngine:
    """Device-side stitcher workers and the uid probe table."""

    def __init__(
        self,
        engine: NicEngine,
        partitions: int = 4,
        capacity: int | None = None,
        command_latency_us: float = 0.0,
    ) -> None:
        if partitions < 1:
            raise ValueError("partitions must be >= 1")
        self.engine = engine
        self.memory = engine.memory
        self.queues = [StitcherQueue(i, capacity) for i in range(partitions)]
        self.command_latency_us = command_latency_us
        self.uids: dict[int, InnerNode | LeafNode] = {}
        self.tombstones: set[int] = set()
        # uids reachable from the installed root
        self.reachable: set[int] = set()
        self.fence_arrivals: dict[int, set[int]] = {}
        self.faults: list[str] = []
        self.stats: Counter = Counter()
        self.on_apply: Callable[[int, StitchCommand], None] | None = None
        self.log: list[tuple[int, StitchCommand]] | None = None
        self._enqueue_lock = threading.Lock()
        self._apply_lock = threading.RLock()
        self._workers: list[threading.Thread] = []
        self._stop = threading.Event()

    @property
    def partitions(self) -> int:
        return len(self.queues)

    # -- producer side ---------------------------------------------------

    def submit(self, batch: Iterable[tuple[int, StitchCommand]]) -> None:
        """Enqueue a batch atomically with respect to other producers.

        A FENCE addressed to ``ALL_QUEUES`` is placed in every queue.
        """
        with self._enqueue_lock:
            for q, cmd in batch:
                if cmd.kind is Kind.FENCE:
                    # Fences always span every queue, whatever queue is named.
                    for t in self.queues:
                        t.put(cmd)
                    continue
                if cmd.kind is Kind.COPY:
                    self.stats["copy_bytes"] += cmd.nbytes()
                self.stats["bytes"] += cmd.nbytes()
                self.queues[q].put(cmd)

    # -- application -----------------------------------------------------

    def _complete(self, node: InnerNode | LeafNode) -> bool:
        if node.linked:
            return True
        if isinstance(node, InnerNode):
            for ref in node.child_refs():
                t = ref.target if ref is not None else None
                if t is None:
                    return False
                child = self.uids.get(t[0])
                if child is None or child.handle != t[1] or not self._complete(child):
                    return False
        node.linked = True
        return True

    def _mark_reachable(self, node: InnerNode | LeafNode) -> None:
        stack = [node]
        while stack:
            n = stack.pop()
            if n.uid in self.reachable:
                continue
            self.reachable.add(n.uid)
            if isinstance(n, InnerNode):
                for ref in n.child_refs():
                    t = ref.target
                    if t is not None and t[0] not in self.reachable and t[0] in self.uids:
                        stack.append(self.uids[t[0]])

    def _retire(self, items: Iterable) -> None:
        epochs = self.engine.epochs
        for obj in items:
            if isinstance(obj, HostArray):
                epochs.retire(obj)
                continue
            node = self.uids.pop(obj, None)
            self.tombstones.add(obj)
            self.reachable.discard(obj)
            if node is not None:
                node.retired = True
                epochs.retire(node.handle)
            self.stats["retired"] += 1

    def _may_retire(self, parent_live: bool) -> bool:
        # Retiring through a parent nobody can reach yet would free nodes
        # that its still-installed predecessor points at.
        return parent_live

    def _try_connect(self, cmd: StitchCommand) -> bool:
        parent = None
        if cmd.parent_uid != ROOT_UID:
            parent = self.uids.get(cmd.parent_uid)
            if parent is None:
                if cmd.parent_uid in self.tombstones:
                    self.stats["connect_skipped"] += 1
                    self._retire(cmd.retire)
                    return True
                return False
        child = self.uids.get(cmd.child_uid)
        if child is None:
            if cmd.child_uid in self.tombstones:
                self._fault(f"CONNECT to retired child uid {cmd.child_uid}")
                return True
            return False
        if not self._complete(child):
            return False
        parent_live = parent is None or parent.uid in self.reachable
        if cmd.retire and not self._may_retire(parent_live):
            return False
        if parent is None:
            ref = self.memory.root
        else:
            seg, idx = cmd.slot
            ref = parent.children[seg][idx]
        ref.swap(child.uid, child.handle)
        if parent_live:
            self._mark_reachable(child)
        self.stats["connects"] += 1
        self._retire(cmd.retire)
        return True

    def _clear(self, cmd: StitchCommand) -> None:
        leaf = self.uids.get(cmd.leaf_uid)
        if isinstance(leaf, LeafNode) and not leaf.retired:
            leaf.buffer.clear()
            self.stats["clears"] += 1
        else:
            # The leaf was replaced; in-flight readers still need its entries.
            self.stats["clear_skipped"] += 1

    def _retry_deferred(self) -> None:
        progress = True
        while progress:
            progress = False
            for q in self.queues:
                if not q.deferred:
                    continue
                still = []
                blocked = set()
                for cmd in q.deferred:
                    if cmd.kind is Kind.CLEAR_BUFFER:
                        # Waits for every earlier deferred command on its queue.
                        if still:
                            still.append(cmd)
                        else:
                            self._clear(cmd)
                            progress = True
                            self._applied(q, cmd)
                        continue
                    key = (cmd.parent_uid, cmd.slot)
                    # A later CONNECT to the same slot must not overtake an earlier one.
                    if key not in blocked and self._try_connect(cmd):
                        progress = True
                        self._applied(q, cmd)
                    else:
                        blocked.add(key)
                        still.append(cmd)
                q.deferred = still

    def _applied(self, q: StitcherQueue, cmd: StitchCommand) -> None:
        if self.log is not None:
            self.log.append((q.partition, cmd))
        if self.on_apply is not None:
            self.on_apply(q.partition, cmd)

    def _fault(self, msg: str) -> None:
        log.error("stitch protocol fault: %s", msg)
        self.faults.append(msg)

    def deferred_count(self) -> int:
        return sum(len(q.deferred) for q in self.queues)

    def step(self, qi: int) -> bool:
        """Apply the head command of queue ``qi``; False if empty or fence-blocked."""
        with self._apply_lock:
            return self._step_locked(self.queues[qi])

    def _step_locked(self, q: StitcherQueue) -> bool:
        if not q.items:
            return False
        cmd = q.items[0]
        if cmd.kind is Kind.FENCE:
            arrived = self.fence_arrivals.setdefault(cmd.barrier, set())
            arrived.add(q.partition)
            if len(arrived) < len(self.queues) or self.deferred_count():
                return False
            for other in self.queues:
                head = other.items.popleft()
                assert head.kind is Kind.FENCE and head.barrier == cmd.barrier
                other.last_applied_seq = head.seq
                with other.cond:
                    other.cond.notify_all()
            del self.fence_arrivals[cmd.barrier]
            self.stats["fences"] += 1
            self._applied(q, cmd)
            return True
        q.items.popleft()
        if cmd.seq <= q.last_applied_seq:
            self._fault(f"queue {q.partition}: sequence {cmd.seq} after {q.last_applied_seq}")
        q.last_applied_seq = cmd.seq
        with q.cond:
            q.cond.notify_all()
        if cmd.kind is Kind.COPY:
            node = cmd.node
            self.memory.install(node)
            self.uids[node.uid] = node
            self.stats["copies"] += 1
            self._applied(q, cmd)
        elif cmd.kind is Kind.CONNECT:
            key = (cmd.parent_uid, cmd.slot)
            if all((d.parent_uid, d.slot) != key for d in q.deferred if d.kind is Kind.CONNECT) and self._try_connect(cmd):
                self._applied(q, cmd)
            else:
                self.stats["deferred"] += 1
                q.deferred.append(cmd)
                return True
        elif q.deferred:
            self.stats["deferred"] += 1
            q.deferred.append(cmd)
            return True
        else:
            self._clear(cmd)
            self._applied(q, cmd)
        self._retry_deferred()
        self.engine.epochs.collect()
        return True

    def pending(self) -> int:
        return sum(len(q.items) for q in self.queues) + self.deferred_count()

    def drain(self, rng: random.Random | None = None) -> None:
        """Apply everything queued, choosing queues at random when ``rng`` is given.

        Leftover deferred CONNECTs after a full drain are protocol faults.
        """
        while True:
            ready = [i for i, q in enumerate(self.queues) if q.items]
            if not ready:
                break
            if rng is not None:
                rng.shuffle(ready)
            if not any(self.step(i) for i in ready):
                break
        stuck = [c for q in self.queues for c in q.deferred]
        blocked = [q.items[0] for q in self.queues if q.items]
        if stuck or blocked:
            self._fault(f"{len(stuck)} CONNECTs never resolved, {len(blocked)} queues blocked")
            raise ProtocolFault(self.faults[-1])

    # -- threaded workers ------------------------------------------------

    def start(self) -> None:
        self._stop.clear()
        for q in self.queues:
            t = threading.Thread(target=self._worker, args=(q,), name=f"stitcher-{q.partition}", daemon=True)
            t.start()
            self._workers.append(t)

    def stop(self) -> None:
        self._stop.set()
        for q in self.queues:
            with q.cond:
                q.cond.notify_all()
        for t in self._workers:
            t.join(timeout=2)
        self._workers.clear()

    def _worker(self, q: StitcherQueue) -> None:
        delay = self.command_latency_us / 1e6
        while not self._stop.is_set():
            with q.cond:
                if not q.items:
                    q.cond.wait(0.05)
                    continue
            if delay or q.delay_s:
                time.sleep(delay + q.delay_s)
            with self._apply_lock:
                progressed = self._step_locked(q)
            if not progressed:
                time.sleep(0.0005)

    def wait_idle(self, timeout: float = 30.0) -> None:
        """Block until every queue is empty; raises ProtocolFault on timeout."""
        end = time.monotonic() + timeout
        while self.pending():
            if time.monotonic() > end:
                self._fault(f"stitch queues not idle after {timeout}s: {self.pending()} pending")
                raise ProtocolFault(self.faults[-1])
            time.sleep(0.001)
