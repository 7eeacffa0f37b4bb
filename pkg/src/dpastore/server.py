"""UDP front end: one socket and receive queue per traverser context.

A datagram arriving on port ``base_port + i`` is served by context ``i``.
Each context has a receiver thread feeding a bounded queue and a worker
thread draining it; when the queue is full the datagram is dropped and the
client's retry recovers it. A resend whose original is still queued is
dropped on arrival, so a slow context is not buried under duplicates.
"""

from __future__ import annotations

import collections
import logging
import random
import socket
import threading
from dataclasses import dataclass

from .engine import RECEIVE_QUEUE_DEPTH
from .store import Store
from .wire import (
    DropPacket,
    MalformedPacket,
    Response,
    Status,
    decode_request,
    encode_response,
)

log = logging.getLogger(__name__)

RECV_BYTES = 2048


@dataclass
class ContextCounters:
    received: int = 0
    served: int = 0
    dropped_overflow: int = 0
    dropped_duplicate: int = 0
    dropped_injected: int = 0
    dropped_foreign: int = 0
    malformed: int = 0
    responses: int = 0


class _Context:
    def __init__(self, server: "Server", tid: int, sock: socket.socket) -> None:
        self.server = server
        self.tid = tid
        self.sock = sock
        self.queue: collections.deque[tuple[bytes, tuple]] = collections.deque()
        self.queued: set[tuple[bytes, tuple]] = set()
        self.ready = threading.Condition()
        self.counters = ContextCounters()
        self.parked = False
        self.rng = random.Random(server.seed * 7919 + tid)
        self.threads: list[threading.Thread] = []

    def start(self) -> None:
        for target, name in ((self._receive, "rx"), (self._serve, "tx")):
            t = threading.Thread(target=target, name=f"ctx{self.tid}-{name}", daemon=True)
            t.start()
            self.threads.append(t)

    def _receive(self) -> None:
        srv = self.server
        while not srv.stopping.is_set():
            try:
                data, addr = self.sock.recvfrom(RECV_BYTES)
            except socket.timeout:
                continue
            except OSError as exc:
                if not srv.stopping.is_set():
                    log.error("context %d socket failed: %s; parking", self.tid, exc)
                    self.parked = True
                break
            c = self.counters
            c.received += 1
            if srv.drop_rate and self.rng.random() < srv.drop_rate:
                c.dropped_injected += 1
                continue
            item = (data, addr)
            with self.ready:
                if item in self.queued:
                    c.dropped_duplicate += 1
                    continue
                if len(self.queue) >= srv.queue_depth:
                    c.dropped_overflow += 1
                    continue
                self.queue.append(item)
                self.queued.add(item)
                self.ready.notify()

    def _serve(self) -> None:
        srv = self.server
        while True:
            with self.ready:
                while not self.queue and not srv.stopping.is_set():
                    self.ready.wait(0.1)
                if not self.queue:
                    return
                data, addr = item = self.queue.popleft()
                self.queued.discard(item)
            for out in self._process(data):
                if srv.response_drop_rate and self.rng.random() < srv.response_drop_rate:
                    self.counters.dropped_injected += 1
                    continue
                try:
                    self.sock.sendto(out, addr)
                    self.counters.responses += 1
                except OSError as exc:
                    log.warning("context %d send failed: %s", self.tid, exc)

    def _process(self, data: bytes) -> list[bytes]:
        c = self.counters
        try:
            req = decode_request(data)
        except DropPacket:
            c.dropped_foreign += 1
            return []
        except MalformedPacket as exc:
            c.malformed += 1
            if exc.request_id is None:
                return []
            return [encode_response(Response(exc.op, Status.MALFORMED, exc.request_id, 0))]
        c.served += 1
        return [encode_response(r) for r in self.server.store.execute(req, self.tid)]


class Server:
    """Serve a :class:`Store` over UDP on ports ``base_port .. base_port + threads - 1``.

    ``base_port=0`` picks a free contiguous port range.
    """

    def __init__(
        self,
        store: Store,
        base_port: int = 0,
        host: str = "127.0.0.1",
        queue_depth: int = RECEIVE_QUEUE_DEPTH,
        drop_rate: float = 0.0,
        response_drop_rate: float = 0.0,
        seed: int = 0,
    ) -> None:
        if not 0.0 <= drop_rate < 1.0 or not 0.0 <= response_drop_rate < 1.0:
            raise ValueError("drop rates must lie in [0, 1)")
        if queue_depth < 1:
            raise ValueError("queue_depth must be >= 1")
        self.store = store
        self.host = host
        self.queue_depth = queue_depth
        self.drop_rate = drop_rate
        self.response_drop_rate = response_drop_rate
        self.seed = seed
        self.threads = store.config.engine.threads
        self.stopping = threading.Event()
        socks, self.base_port = self._bind(host, base_port, self.threads)
        self.contexts = [_Context(self, i, s) for i, s in enumerate(socks)]
        self._started = False

    @staticmethod
    def _bind(host: str, base_port: int, count: int) -> tuple[list[socket.socket], int]:
        attempts = 1 if base_port else 50
        last: OSError | None = None
        for _ in range(attempts):
            base = base_port
            if not base:
                probe = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
                probe.bind((host, 0))
                base = probe.getsockname()[1]
                probe.close()
                if base + count > 65535:
                    continue
            socks: list[socket.socket] = []
            try:
                for i in range(count):
                    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
                    socks.append(s)
                    s.bind((host, base + i))
                    s.settimeout(0.2)
                return socks, base
            except OSError as exc:
                last = exc
                for s in socks:
                    s.close()
        raise OSError(f"cannot bind {count} ports from {base_port or 'any'} on {host}: {last}")

    @property
    def ports(self) -> range:
        return range(self.base_port, self.base_port + self.threads)

    def start(self) -> "Server":
        if self._started:
            return self
        if not self.store.threaded:
            raise ValueError("the server needs a threaded store so patches are applied in the background")
        if not self.store._running:
            self.store.start()
        for ctx in self.contexts:
            ctx.start()
        self._started = True
        return self

    def stop(self) -> None:
        self.stopping.set()
        for ctx in self.contexts:
            with ctx.ready:
                ctx.ready.notify_all()
        for ctx in self.contexts:
            for t in ctx.threads:
                t.join(timeout=2)
            ctx.sock.close()
        self.store.stop()

    def __enter__(self) -> "Server":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def counters(self) -> ContextCounters:
        total = ContextCounters()
        for ctx in self.contexts:
            for name in vars(total):
                setattr(total, name, getattr(total, name) + getattr(ctx.counters, name))
        return total
