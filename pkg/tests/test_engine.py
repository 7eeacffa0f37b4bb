from __future__ import annotations

import random
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpastore import checks
from dpastore.engine import (
    CACHE_CAPACITY,
    MISS,
    EngineConfig,
    EpochState,
    HotCache,
    InsertBuffer,
    Tag,
)
from dpastore.store import Store, StoreConfig
from dpastore.wire import Op, Request, Status, hint_for_key


# -- insert buffer


@given(st.integers(1, 16), st.lists(st.tuples(st.integers(0, 20), st.integers(0, 1 << 64 - 1)), max_size=40))
def test_buffer_lookup_returns_newest_committed(cap, writes):
    buf = InsertBuffer(cap)
    model: dict[int, int] = {}
    for i, (k, v) in enumerate(writes):
        slot, last = buf.append(k, v, Tag.UPDATE)
        if i < cap:
            assert slot == i and last == (i == cap - 1)
            model[k] = v
        else:
            assert slot is None and buf.sealed
    for k, v in model.items():
        assert buf.lookup(k)[1] == v
    assert len(buf) == min(len(writes), cap)


def test_buffer_concurrent_appends_fill_exactly_once():
    cap = 64
    buf = InsertBuffer(cap)
    taken, lasts = [], []
    lock = threading.Lock()

    def worker(t):
        for i in range(40):
            slot, last = buf.append(t * 1000 + i, i, Tag.INSERT)
            with lock:
                if slot is not None:
                    taken.append(slot)
                if last:
                    lasts.append(slot)

    ts = [threading.Thread(target=worker, args=(t,)) for t in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert sorted(taken) == list(range(cap))
    assert lasts == [cap - 1]
    assert len(buf.snapshot()) == cap


def test_buffer_seal_and_clear():
    buf = InsertBuffer(4)
    buf.append(1, 1, Tag.INSERT)
    assert buf.seal() == ((1, 1, Tag.INSERT),)
    assert buf.append(2, 2, Tag.INSERT) == (None, False)
    buf.clear()
    assert buf.append(2, 2, Tag.INSERT) == (0, False) and buf.clears == 1
    with pytest.raises(ValueError):
        InsertBuffer(0)


# -- hot cache


def test_cache_admit_lookup_invalidate():
    c = HotCache(seed=1)
    h = hint_for_key(5)
    assert c.lookup(5, h) is MISS
    c.admit(5, 50, h)
    assert c.lookup(5, h) == 50
    c.admit(5, 51, h)
    assert c.lookup(5, h) == 51
    assert c.invalidate(5, h)
    assert c.lookup(5, h) is MISS


def test_cache_never_returns_another_keys_value():
    c = HotCache(seed=2)
    rng = random.Random(3)
    live = {}
    for _ in range(5000):
        k = rng.randrange(400)
        if rng.random() < 0.7:
            v = rng.getrandbits(64)
            c.admit(k, v, hint_for_key(k))
            live[k] = v
        else:
            c.invalidate(k, hint_for_key(k))
            live.pop(k, None)
        q = rng.randrange(400)
        got = c.lookup(q, hint_for_key(q))
        if got is not MISS:
            assert live.get(q) == got
    assert len(c.resident()) <= CACHE_CAPACITY
    assert c.rebuilds > 0


def test_bloom_false_positive_rate_near_analytic():
    rate, per_cache = checks.bloom_fp_rate(caches=10, absent=20_000, seed=4)
    assert 0.28 <= rate <= 0.34
    assert len(per_cache) == 10


# -- epochs


def test_epoch_defers_until_readers_leave():
    freed = []
    ep = EpochState(2, freed.append)
    ep.enter(0)
    ep.retire("old")
    ep.enter(1)  # started after the retirement: does not hold it back
    assert ep.collect() == 0
    ep.exit(1)
    assert ep.collect() == 0
    ep.exit(0)
    assert ep.collect() == 1 and freed == ["old"]
    assert ep.pending() == 0


def test_epoch_frees_immediately_when_idle():
    freed = []
    ep = EpochState(3, freed.append)
    ep.retire(1)
    ep.retire(2)
    assert ep.collect() == 2


def test_canary_catches_premature_reclamation(monkeypatch):
    # Negative control: with reclamation ignoring readers, the fuzzer must see poisoned reads.
    def eager(self):
        ready = [obj for obj, _ in self.retired]
        self.retired = []
        for obj in ready:
            self._free(obj)
        return len(ready)

    monkeypatch.setattr(EpochState, "collect", eager)
    total = checks.FuzzStats()
    for i in range(60):
        total.merge(checks.run_schedule(1000 + i, epoch_mode=True))
    assert total.poisoned > 0


def test_epoch_schedules_clean():
    total = checks.FuzzStats()
    for i in range(40):
        total.merge(checks.run_schedule(2000 + i, epoch_mode=True))
    assert total.poisoned == 0 and not total.mismatches and not total.faults


# -- request handling


def small_store(**kw):
    st_ = Store(StoreConfig(engine=EngineConfig(threads=2, buffer_capacity=4, **kw)))
    st_.bulk_load(list(range(0, 1000, 10)), [k * 2 for k in range(0, 1000, 10)])
    return st_


def test_get_insert_update_delete_range():
    s = small_store()
    assert s.get(20) == 40 and s.get(21) is None
    s.put(21, 7)
    assert s.get(21) == 7
    s.put(21, 8, Op.UPDATE)
    s.delete(20)
    assert s.get(20) is None and s.get(21) == 8
    assert s.range(10, 3) == [(10, 20), (21, 8), (30, 60)]
    s.quiesce()
    assert s.get(21) == 8 and s.get(20) is None
    assert s.device_items() == s.host.items()


def test_sealed_buffer_returns_retry_until_patched():
    s = small_store()
    ctx = 0
    for i in range(4):
        r = s.execute(Request(Op.INSERT, 0, 1 + i, 1), ctx)[0]
        assert r.status is Status.OK
    r = s.execute(Request(Op.INSERT, 0, 6, 1), ctx)[0]
    assert r.status is Status.RETRY
    s.pump()
    assert s.execute(Request(Op.INSERT, 0, 6, 1), ctx)[0].status is Status.OK


def test_hinted_get_fills_cache_and_write_invalidates():
    s = small_store()
    h = hint_for_key(30)
    ctx = s.engine.contexts[0]
    for _ in range(2):
        assert s.execute(Request(Op.GET, 0, 30, hint=h), 0)[0].value == 60
    assert ctx.stats.cache_hits == 1
    s.execute(Request(Op.UPDATE, 0, 30, 99, hint=h), 0)
    assert s.execute(Request(Op.GET, 0, 30, hint=h), 0)[0].value == 99


def test_cache_disabled_ignores_hints():
    s = small_store(cache_enabled=False)
    h = hint_for_key(30)
    for _ in range(3):
        s.execute(Request(Op.GET, 0, 30, hint=h), 0)
    assert s.engine.contexts[0].stats.cache_lookups == 0


def test_ping():
    s = small_store()
    r = s.execute(Request(Op.PING, 5, 77), 1)[0]
    assert r.status is Status.OK and r.request_id == 5
