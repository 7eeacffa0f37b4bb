"""Device-domain node formats and intra-node search.

Inner nodes hold up to seven segments. Each segment has its own model,
a pivot array and a parallel child-reference array, both padded to 128
slots. Leaves keep only their model and handles into the host domain,
where the sorted key array and the parallel value array live.

Nodes are immutable once installed; the only mutable state readers can
observe is the content of a :class:`NodeRef`, which is replaced as a whole.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from typing import TYPE_CHECKING, Sequence

from .costmodel import NULL_RECORDER, AccessClass, AccessRecorder
from .pla import KEY_MAX, PlaSegment, predict

if TYPE_CHECKING:
    from .engine import InsertBuffer

MAX_SEGMENTS = 7
SEGMENT_CAPACITY = 128
LEAF_CAPACITY = 128
LINE_BYTES = 64
KEYS_PER_LINE = LINE_BYTES // 8
MODEL_BYTES = 16
BUFFER_ENTRY_BYTES = 24
BUFFER_HEADER_BYTES = 16

DEV = AccessClass.DEVICE_MEMORY
DMA = AccessClass.HOST_DMA
L3 = AccessClass.SHARED_L3


class CorruptionError(RuntimeError):
    """An index invariant was found broken during a lookup."""


class PoisonedRead(RuntimeError):
    """A reader dereferenced memory that had already been reclaimed."""


class HostArray:
    """A contiguous array in the host domain (keys or values of one leaf)."""

    __slots__ = ("handle", "data", "poisoned")

    def __init__(self, handle: int, data: list | tuple) -> None:
        self.handle = handle
        self.data = data
        self.poisoned = False

    def poison(self) -> None:
        self.poisoned = True

    def nbytes(self) -> int:
        return 8 * len(self.data)


class NodeRef:
    """A swappable reference to a device node, stored as ``(uid, handle)``."""

    __slots__ = ("target",)

    def __init__(self, uid: int | None = None, handle: int | None = None) -> None:
        self.target = None if uid is None else (uid, handle)

    def swap(self, uid: int, handle: int) -> tuple[int, int] | None:
        old = self.target
        self.target = (uid, handle)
        return old

    @property
    def uid(self) -> int | None:
        t = self.target
        return None if t is None else t[0]

    def __repr__(self) -> str:
        return f"NodeRef({self.target!r})"


class InnerNode:
    __slots__ = (
        "uid", "handle", "level", "segment_count", "first_keys", "segments",
        "pivots", "pivot_counts", "children", "linked", "retired", "poisoned",
    )

    def __init__(
        self,
        uid: int,
        handle: int,
        level: int,
        segments: Sequence[PlaSegment],
        pivots: Sequence[Sequence[int]],
        children: Sequence[Sequence[NodeRef]],
    ) -> None:
        if not 1 <= len(segments) <= MAX_SEGMENTS:
            raise ValueError(f"segment count {len(segments)} outside 1..{MAX_SEGMENTS}")
        self.uid = uid
        self.handle = handle
        self.level = level
        self.segment_count = len(segments)
        self.segments = list(segments)
        self.pivot_counts = [len(p) for p in pivots]
        self.first_keys = [p[0] for p in pivots] + [KEY_MAX] * (MAX_SEGMENTS - len(pivots))
        self.pivots = []
        self.children = []
        for piv, ch in zip(pivots, children):
            if len(piv) > SEGMENT_CAPACITY:
                raise ValueError(f"segment holds {len(piv)} pivots, capacity {SEGMENT_CAPACITY}")
            if len(ch) != len(piv):
                raise ValueError("pivot and child arrays differ in length")
            pad = SEGMENT_CAPACITY - len(piv)
            self.pivots.append(list(piv) + [KEY_MAX] * pad)
            self.children.append(list(ch) + [None] * pad)
        self.linked = False
        self.retired = False
        self.poisoned = False

    def poison(self) -> None:
        self.poisoned = True
        self.segments = None
        self.pivots = None
        self.children = None

    def child_refs(self):
        for s in range(self.segment_count):
            yield from self.children[s][: self.pivot_counts[s]]

    def child_count(self) -> int:
        return sum(self.pivot_counts)

    def device_bytes(self) -> int:
        # metadata + first keys line, model lines, padded pivot and child arrays
        model_lines = -(-MAX_SEGMENTS * MODEL_BYTES // LINE_BYTES)
        return LINE_BYTES * (1 + model_lines) + self.segment_count * 2 * 8 * SEGMENT_CAPACITY


class LeafNode:
    __slots__ = (
        "uid", "handle", "model", "key_count", "keys_ref", "values_ref",
        "buffer", "min_key", "linked", "retired", "poisoned",
    )

    def __init__(
        self,
        uid: int,
        handle: int,
        model: PlaSegment | None,
        keys_ref: HostArray,
        values_ref: HostArray,
        buffer: "InsertBuffer",
    ) -> None:
        self.uid = uid
        self.handle = handle
        self.model = model
        self.key_count = len(keys_ref.data)
        if self.key_count > LEAF_CAPACITY:
            raise ValueError(f"leaf holds {self.key_count} keys, capacity {LEAF_CAPACITY}")
        self.keys_ref = keys_ref
        self.values_ref = values_ref
        self.buffer = buffer
        self.min_key = keys_ref.data[0] if self.key_count else KEY_MAX
        self.linked = False
        self.retired = False
        self.poisoned = False

    def poison(self) -> None:
        self.poisoned = True
        self.model = None
        self.keys_ref = None
        self.values_ref = None

    def device_bytes(self) -> int:
        return LINE_BYTES + BUFFER_HEADER_BYTES + self.buffer.capacity * BUFFER_ENTRY_BYTES


class DeviceMemory:
    """Handle-addressed node store plus the root reference."""

    ROOT_UID = 0

    def __init__(self) -> None:
        self.nodes: dict[int, InnerNode | LeafNode] = {}
        self.root = NodeRef()

    def install(self, node: InnerNode | LeafNode) -> None:
        self.nodes[node.handle] = node

    def free(self, handle: int) -> InnerNode | LeafNode | None:
        node = self.nodes.pop(handle, None)
        if node is not None:
            node.poison()
        return node

    def deref(self, ref: NodeRef) -> InnerNode | LeafNode:
        target = ref.target
        if target is None:
            raise CorruptionError("dereferenced an empty reference")
        uid, handle = target
        node = self.nodes.get(handle)
        if node is None:
            raise PoisonedRead(f"handle {handle} (uid {uid}) is not live")
        if node.uid != uid:
            raise CorruptionError(f"handle {handle} holds uid {node.uid}, expected {uid}")
        if node.poisoned:
            raise PoisonedRead(f"uid {uid} was reclaimed")
        return node

    def index_bytes(self) -> int:
        return sum(n.device_bytes() for n in self.nodes.values())


def _lines(indices) -> int:
    return len({i // KEYS_PER_LINE for i in indices})


def locate_segment(node: InnerNode, key: int) -> int:
    """Largest segment whose first key is <= ``key`` (0 if none)."""
    i = bisect_right(node.first_keys, key, 0, node.segment_count) - 1
    return i if i > 0 else 0


def _binary_search(piv: list[int], n: int, key: int) -> tuple[int, list[int]]:
    lo, hi = 0, n
    touched = []
    while lo < hi:
        mid = (lo + hi) // 2
        touched.append(mid)
        if piv[mid] <= key:
            lo = mid + 1
        else:
            hi = mid
    return max(lo - 1, 0), touched


def locate_child(
    node: InnerNode,
    seg: int,
    key: int,
    eps: int,
    infinite: bool = False,
    rec: AccessRecorder = NULL_RECORDER,
) -> tuple[int, NodeRef]:
    """Index and reference of the child whose pivot interval holds ``key``.

    Scans forward from ``p - eps`` where ``p`` is the segment's prediction;
    a key strictly between two pivots may need one slot below the window.
    """
    piv = node.pivots[seg]
    n = node.pivot_counts[seg]
    if infinite:
        idx, touched = _binary_search(piv, n, key)
        rec.record(DEV, _lines(touched))
        return idx, node.children[seg][idx]
    p = predict(node.segments[seg], key)
    last = n - 1
    lo = min(max(p - eps, 0), last)
    hi = min(max(p + eps, 0), last)
    if piv[lo] > key:
        if lo == 0:
            rec.record(DEV, 1)
            return 0, node.children[seg][0]
        if piv[lo - 1] > key:
            raise CorruptionError(
                f"node {node.uid} seg {seg}: key {key} below pivot window [{lo}, {hi}]"
            )
        rec.record(DEV, _lines((lo - 1, lo)))
        return lo - 1, node.children[seg][lo - 1]
    idx = lo
    while idx < hi and piv[idx + 1] <= key:
        idx += 1
    if idx == hi and hi < last and piv[hi + 1] <= key:
        raise CorruptionError(
            f"node {node.uid} seg {seg}: key {key} above pivot window [{lo}, {hi}]"
        )
    rec.record(DEV, _lines(range(lo, min(idx + 1, last) + 1)))
    return idx, node.children[seg][idx]


def upper_bound_after(node: InnerNode, seg: int, idx: int) -> int | None:
    """Routing upper bound of child ``idx`` in segment ``seg`` (None = inherited)."""
    if idx + 1 < node.pivot_counts[seg]:
        return node.pivots[seg][idx + 1]
    if seg + 1 < node.segment_count:
        return node.first_keys[seg + 1]
    return None


def visit_inner(
    node: InnerNode,
    key: int,
    eps: int,
    infinite: bool = False,
    rec: AccessRecorder = NULL_RECORDER,
    cached_lines: bool = False,
) -> tuple[NodeRef, int | None]:
    """One inner-node step: returns the child reference and its upper bound."""
    head = L3 if cached_lines else DEV
    rec.record(head, 1)  # metadata + segment first keys
    try:
        seg = locate_segment(node, key)
        rec.record(head, 1)  # segment models
        idx, ref = locate_child(node, seg, key, eps, infinite, rec)
    except TypeError:
        # poison() nulls the arrays; reading them means the node was reclaimed under us
        if node.poisoned:
            raise PoisonedRead(f"inner uid {node.uid} reclaimed during visit") from None
        raise
    rec.record(DEV, 1)  # child reference line
    rec.event("inner_visits")
    if node.poisoned:
        raise PoisonedRead(f"inner uid {node.uid} reclaimed during visit")
    return ref, upper_bound_after(node, seg, idx)


def find_leaf(
    memory: DeviceMemory,
    key: int,
    eps_inner: int,
    infinite: bool = False,
    rec: AccessRecorder = NULL_RECORDER,
    root_cached: bool = False,
) -> tuple[LeafNode, int | None]:
    """Descend from the root; returns the leaf and its routing upper bound."""
    node = memory.deref(memory.root)
    bound = None
    first = True
    while isinstance(node, InnerNode):
        ref, nb = visit_inner(node, key, eps_inner, infinite, rec, root_cached and first)
        first = False
        if nb is not None and (bound is None or nb < bound):
            bound = nb
        node = memory.deref(ref)
    return node, bound


def _window(model: PlaSegment, key: int, eps: int, n: int, extra: int = 0) -> tuple[int, int]:
    p = predict(model, key)
    last = n - 1 + extra
    lo = min(max(p - eps, 0), last)
    hi = min(max(p + eps + extra, 0), last)
    return lo, hi


def _host_keys(leaf: LeafNode) -> tuple:
    ref = leaf.keys_ref
    if ref is None or ref.poisoned:
        raise PoisonedRead(f"key array of leaf uid {leaf.uid} was reclaimed")
    return ref.data


def _model(leaf: LeafNode, infinite: bool) -> PlaSegment | None:
    model = leaf.model
    if model is None and not infinite:
        raise PoisonedRead(f"model of leaf uid {leaf.uid} was reclaimed")
    return model


def leaf_locate(
    leaf: LeafNode,
    key: int,
    eps: int,
    infinite: bool = False,
    rec: AccessRecorder = NULL_RECORDER,
) -> int | None:
    """Slot of ``key`` in the leaf's host key array, or None when absent."""
    n = leaf.key_count
    if n == 0:
        return None
    model = _model(leaf, infinite)
    keys = _host_keys(leaf)
    rec.record(DMA, 1)  # key window; sequential lines collapse into one DMA
    if infinite:
        i = bisect_right(keys, key, 0, n) - 1
        return i if i >= 0 and keys[i] == key else None
    lo, hi = _window(model, key, eps, n)
    for i in range(lo, hi + 1):
        k = keys[i]
        if k == key:
            return i
        if k > key:
            break
    return None


def leaf_lower_bound(
    leaf: LeafNode,
    key: int,
    eps: int,
    infinite: bool = False,
    rec: AccessRecorder = NULL_RECORDER,
) -> int:
    """First slot whose key is >= ``key`` (``key_count`` if none)."""
    n = leaf.key_count
    if n == 0:
        return 0
    model = _model(leaf, infinite)
    keys = _host_keys(leaf)
    rec.record(DMA, 1)
    if infinite:
        return bisect_left(keys, key, 0, n)
    lo, hi = _window(model, key, eps, n, extra=1)
    i = lo
    while i < hi and keys[i] < key:
        i += 1
    if i == hi and hi < n and keys[hi] < key:
        if hi != n - 1:
            raise CorruptionError(f"leaf {leaf.uid}: lower bound of {key} above window")
        i = n
    if i > 0 and i == lo and keys[i - 1] >= key:
        raise CorruptionError(f"leaf {leaf.uid}: lower bound of {key} below window")
    return i
