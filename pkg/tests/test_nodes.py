from __future__ import annotations

import bisect
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpastore.costmodel import AccessClass, AccessRecorder
from dpastore.engine import EngineConfig, InsertBuffer
from dpastore.nodes import (
    LEAF_CAPACITY,
    CorruptionError,
    DeviceMemory,
    HostArray,
    InnerNode,
    LeafNode,
    NodeRef,
    PoisonedRead,
    leaf_locate,
    leaf_lower_bound,
)
from dpastore.pla import EpsilonConfig, train_segments
from dpastore.store import Store, StoreConfig

U64 = (1 << 64) - 1


def make_leaf(keys, eps, infinite=False):
    model = None
    if keys:
        model = train_segments(keys, eps, max_len=LEAF_CAPACITY, infinite_mode=infinite)[0][1]
    return LeafNode(1, 1, model, HostArray(1, tuple(keys)), HostArray(2, tuple(k + 1 for k in keys)),
                    InsertBuffer(4))


leaf_keys = st.sets(st.integers(0, U64), min_size=1, max_size=LEAF_CAPACITY).map(sorted)


@given(leaf_keys, st.integers(1, 8), st.lists(st.integers(0, U64), max_size=30), st.booleans())
def test_leaf_search_matches_bisect(keys, eps, probes, infinite):
    segs = train_segments(keys, eps, max_len=LEAF_CAPACITY)
    keys = keys[: segs[0][1].covered_count]  # a leaf holds exactly one model
    leaf = make_leaf(keys, eps, infinite)
    for q in probes + keys + [k + 1 for k in keys if k < U64]:
        i = bisect.bisect_left(keys, q)
        want = i if i < len(keys) and keys[i] == q else None
        assert leaf_locate(leaf, q, eps, infinite) == want
        assert leaf_lower_bound(leaf, q, eps, infinite) == i


def test_leaf_access_charges_one_dma():
    leaf = make_leaf(list(range(0, 1000, 10)), 8)
    rec = AccessRecorder()
    leaf_locate(leaf, 500, 8, rec=rec)
    assert rec.current.counts[AccessClass.HOST_DMA] == 1


def test_poisoned_leaf_read_detected():
    leaf = make_leaf([1, 2, 3], 8)
    leaf.poison()
    with pytest.raises(PoisonedRead):
        leaf_locate(leaf, 2, 8)


def test_leaf_capacity_enforced():
    with pytest.raises(ValueError):
        make_leaf(list(range(LEAF_CAPACITY + 1)), 8)


def test_device_memory_deref_checks():
    mem = DeviceMemory()
    with pytest.raises(CorruptionError):
        mem.deref(mem.root)
    leaf = make_leaf([5], 1)
    mem.install(leaf)
    assert mem.deref(NodeRef(1, 1)) is leaf
    with pytest.raises(CorruptionError):
        mem.deref(NodeRef(99, 1))  # handle reused by a different uid
    mem.free(1)
    with pytest.raises(PoisonedRead):
        mem.deref(NodeRef(1, 1))


def test_inner_node_shape_checks():
    seg = train_segments([0], 4)[0][1]
    with pytest.raises(ValueError):
        InnerNode(1, 1, 1, [], [], [])
    with pytest.raises(ValueError):
        InnerNode(1, 1, 1, [seg], [[0, 5]], [[NodeRef(2, 2)]])
    node = InnerNode(1, 1, 1, [seg], [[0]], [[NodeRef(2, 2)]])
    assert node.child_count() == 1 and node.device_bytes() > 0


@pytest.mark.parametrize("eps_inner,infinite", [(4, False), (1, False), (0, True)])
def test_descent_routes_like_host_replica(eps_inner, infinite):
    rng = random.Random(eps_inner)
    keys = sorted(rng.sample(range(1 << 40), 30_000))
    cfg = StoreConfig(engine=EngineConfig(threads=1, eps=EpsilonConfig(eps_inner, 8, infinite)))
    st_ = Store(cfg)
    st_.bulk_load(keys)
    assert st_.depth() >= 2
    probes = rng.sample(keys, 500) + [rng.randrange(1 << 41) for _ in range(500)] + [0, U64]
    for q in probes:
        assert st_.leaf_for(q).uid == st_.host.find_leaf(q).uid


def test_depth3_inner_visits_touch_a_few_lines():
    keys = list(range(0, 200_000 * 7, 7))
    st_ = Store(StoreConfig(engine=EngineConfig(threads=1)))
    st_.bulk_load(keys)
    assert st_.depth() == 3
    rec = st_.engine.contexts[0].rec
    rec.keep_sequence = True
    for k in keys[::997]:
        assert st_.get(k) == k
    per_req = rec.total.device_memory / rec.requests
    assert 8 <= per_req <= 12  # two inner nodes of ~4-5 lines plus one leaf line
