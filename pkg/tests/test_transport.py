from __future__ import annotations

import socket
import threading
import time

import pytest

from dpastore.client import Call, Client, ClientConfig, ClientError
from dpastore.engine import EngineConfig
from dpastore.server import Server
from dpastore.store import Store, StoreConfig
from dpastore.wire import REQUEST_SIZE, Op, Request, Status, decode_response, encode_request

KEYS = list(range(0, 100_000, 10))


@pytest.fixture
def server():
    st = Store(StoreConfig(engine=EngineConfig(threads=4, buffer_capacity=4), partitions=2, patchers=2),
               threaded=True)
    st.bulk_load(KEYS)
    srv = Server(st).start()
    yield srv
    srv.stop()


def client_for(srv, **kw):
    return Client(ClientConfig(host=srv.host, base_port=srv.base_port, threads=srv.threads, **kw), seed=1)


def raw_exchange(srv, data, port_offset=0, timeout=1.0):
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    s.settimeout(timeout)
    try:
        s.sendto(data, (srv.host, srv.base_port + port_offset))
        return s.recvfrom(2048)[0]
    except socket.timeout:
        return None
    finally:
        s.close()


def test_ping_and_basic_ops(server):
    with client_for(server) as c:
        assert c.ping()
        assert c.get(50) == 50
        assert c.get(51) is None
        assert c.insert(51, 7) is Status.OK
        assert c.get(51) == 7
        assert c.update(51, 8) is Status.OK
        assert c.delete(50) is Status.OK
        assert c.get(50) is None
        assert c.range(40, 3) == [(40, 40), (51, 8), (60, 60)]


def test_large_range_is_reassembled(server):
    with client_for(server) as c:
        got = c.range(0, 300)
    assert got == [(k, k) for k in KEYS[:300]]


def test_pipelined_run_preserves_per_key_order(server):
    calls = []
    for i in range(200):
        calls.append(Call(Op.UPDATE, 70, i))
        calls.append(Call(Op.GET, 70))
    with client_for(server) as c:
        res = c.run(calls, qd_get=16, qd_write=8)
    assert all(r.ok for r in res)
    gets = [r.value for r in res[1::2]]
    assert gets == list(range(200))


def test_malformed_request_gets_malformed_reply(server):
    data = bytearray(encode_request(Request(Op.GET, 1234, 5)))
    data[3] = 77
    resp = decode_response(raw_exchange(server, bytes(data)))
    assert resp.status is Status.MALFORMED and resp.request_id == 1234
    assert server.counters().malformed == 1


def test_foreign_and_runt_datagrams_are_dropped(server):
    assert raw_exchange(server, b"hello world" * 3, timeout=0.3) is None
    assert raw_exchange(server, b"\x01", timeout=0.3) is None
    assert raw_exchange(server, b"\xa5\xd9\x01" + b"\0" * (REQUEST_SIZE + 4), timeout=0.3) is not None
    time.sleep(0.05)
    assert server.counters().dropped_foreign == 2


def test_injected_loss_recovered_by_resends():
    st = Store(StoreConfig(engine=EngineConfig(threads=2, buffer_capacity=4)), threaded=True)
    st.bulk_load(KEYS)
    with Server(st, drop_rate=0.3, response_drop_rate=0.1, seed=3) as srv:
        with client_for(srv, timeout_initial=0.01, resends=20) as c:
            calls = [Call(Op.INSERT, k * 10 + 1, k) for k in range(300)]
            calls += [Call(Op.GET, k * 10 + 1) for k in range(300)]
            res = c.run(calls)
            assert all(r.ok for r in res)
            assert [r.value for r in res[300:]] == list(range(300))
            assert c.stats.resends > 0
        assert srv.counters().dropped_injected > 0


def test_unreachable_server_fails_after_resends():
    probe = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    cfg = ClientConfig(base_port=port, threads=1, timeout_initial=0.001, timeout_max=0.002, resends=2)
    with Client(cfg) as c:
        with pytest.raises(ClientError):
            c.get(1)
        assert c.stats.failures == 1 and c.stats.resends == 2


def test_overload_switches_gets_to_alternate_scheme():
    with Client(ClientConfig(overload_min_samples=10, overload_threshold=0.05)) as c:
        now = time.monotonic()
        for _ in range(20):
            c._note(now, False)
        assert not c.use_alternate(now)
        for _ in range(3):
            c._note(now, True)
        assert c.use_alternate(now)
        assert c.use_alternate(now + 0.5)  # sticks for one window
        assert c.stats.scheme_switches == 1
        later = now + 5
        c._note(later, False)
        assert not c.use_alternate(later)


def test_alternate_gets_still_answered(server):
    with client_for(server, overload_min_samples=1, overload_threshold=-1.0) as c:
        c._note(time.monotonic(), False)
        res = c.run([Call(Op.GET, k) for k in KEYS[:50]])
    assert all(r.alternate and r.value == r.key for r in res)


def test_bind_conflict_and_validation():
    st = Store(StoreConfig(engine=EngineConfig(threads=2)), threaded=True)
    st.bulk_load([1])
    srv = Server(st)
    try:
        with pytest.raises(OSError):
            Server(st, base_port=srv.base_port)
        with pytest.raises(ValueError):
            Server(st, drop_rate=1.0)
    finally:
        srv.stop()
    with pytest.raises(ValueError):
        Server(Store(), queue_depth=0)
    with pytest.raises(ValueError):
        Server(Store()).start()


def test_resend_timeout_tracks_round_trip_time():
    with Client(ClientConfig(timeout_initial=0.005, timeout_max=0.5)) as c:
        assert c.current_timeout() == 0.005
        for _ in range(50):
            c._sample_rtt(0.040)
        assert 0.040 <= c.current_timeout() < 0.06
        for _ in range(50):
            c._sample_rtt(0.0001)
        assert c.current_timeout() == 0.005
        for _ in range(50):
            c._sample_rtt(2.0)
        assert c.current_timeout() == 0.5


def test_queued_duplicates_are_dropped(server, monkeypatch):
    gate = threading.Event()
    orig = server.store.execute

    def stalled(req, tid):
        gate.wait(5)
        return orig(req, tid)

    monkeypatch.setattr(server.store, "execute", stalled)
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    s.settimeout(2)
    try:
        first = encode_request(Request(Op.GET, 1, 10, 0, 0, None))
        second = encode_request(Request(Op.GET, 2, 20, 0, 0, None))
        port = server.base_port
        s.sendto(first, (server.host, port))
        time.sleep(0.05)  # first is now executing, the rest queue behind it
        for pkt in (second, second, second):
            s.sendto(pkt, (server.host, port))
        deadline = time.monotonic() + 2
        while server.counters().dropped_duplicate < 2 and time.monotonic() < deadline:
            time.sleep(0.01)
        gate.set()
        ids = sorted(decode_response(s.recvfrom(2048)[0]).request_id for _ in range(2))
        assert ids == [1, 2]
        s.settimeout(0.2)
        with pytest.raises(socket.timeout):
            s.recvfrom(2048)
    finally:
        s.close()
    assert server.counters().dropped_duplicate == 2
