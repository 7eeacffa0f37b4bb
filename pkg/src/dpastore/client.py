"""Stateless UDP client with pipelining, timeout-driven resends and overload fallback.

Requests are matched to responses by ``request_id``; a resend reuses the id,
so late duplicates are simply discarded. The resend timeout adapts to the
measured round-trip time (smoothed mean plus four deviations, sampled only
from requests answered on the first attempt) so a loaded server is not
flooded with resends. Writes are absolute, which makes a
duplicate delivery harmless. When the timeout rate over the last window
exceeds a threshold, later GETs are steered with the alternate hash and carry
no cache hint.
"""

from __future__ import annotations

import collections
import random
import selectors
import socket
import time
from dataclasses import dataclass, field

from .wire import (
    WRITE_OPS,
    DropPacket,
    MalformedPacket,
    Op,
    Request,
    Status,
    SteeringScheme,
    decode_response,
    encode_request,
    hint_for_key,
)

RECV_BYTES = 2048


class ClientError(RuntimeError):
    """A request failed permanently (all resends timed out)."""


@dataclass
class ClientConfig:
    host: str = "127.0.0.1"
    base_port: int = 7000
    threads: int = 8
    timeout_initial: float = 0.005
    timeout_max: float = 0.5
    resends: int = 8
    retry_backoff_initial: float = 0.0005
    retry_backoff_max: float = 0.008
    retry_limit: int = 100_000
    overload_threshold: float = 0.05
    overload_window: float = 1.0
    overload_min_samples: int = 20
    qd_get: int = 32
    qd_write: int = 18
    use_hints: bool = True

    def __post_init__(self) -> None:
        if self.qd_get < 1 or self.qd_write < 1:
            raise ValueError("queue depths must be >= 1")
        if self.resends < 0:
            raise ValueError("resends must be >= 0")
        if not 0 < self.timeout_initial <= self.timeout_max:
            raise ValueError("need 0 < timeout_initial <= timeout_max")


@dataclass(frozen=True)
class Call:
    op: Op
    key: int
    value: int = 0
    max_count: int = 0


@dataclass
class Result:
    op: Op
    key: int
    status: Status | None
    value: int = 0
    pairs: list[tuple[int, int]] = field(default_factory=list)
    attempts: int = 1
    retries: int = 0
    latency_s: float = 0.0
    alternate: bool = False
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ClientStats:
    sent: int = 0
    resends: int = 0
    timeouts: int = 0
    retry_status: int = 0
    duplicates: int = 0
    failures: int = 0
    alternate_gets: int = 0
    scheme_switches: int = 0


class _Pending:
    __slots__ = ("idx", "call", "packet", "addr", "start", "deadline", "timeout",
                 "attempts", "retries", "backoff", "in_backoff", "frags", "last", "alternate")

    def __init__(self, idx: int, call: Call, packet: bytes, addr: tuple, now: float, timeout: float,
                 alternate: bool) -> None:
        self.idx = idx
        self.call = call
        self.packet = packet
        self.addr = addr
        self.start = now
        self.timeout = timeout
        self.deadline = now + timeout
        self.attempts = 1
        self.retries = 0
        self.backoff = 0.0
        self.in_backoff = False
        self.frags: dict[int, tuple] = {}
        self.last: int | None = None
        self.alternate = alternate


def _is_get_class(op: Op) -> bool:
    return op in (Op.GET, Op.PING)


class Client:
    def __init__(self, config: ClientConfig | None = None, seed: int | None = None) -> None:
        self.config = config or ClientConfig()
        cfg = self.config
        self.scheme = SteeringScheme(cfg.base_port, cfg.threads)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((cfg.host, 0))
        self.sock.setblocking(False)
        self.sel = selectors.DefaultSelector()
        self.sel.register(self.sock, selectors.EVENT_READ)
        rng = random.Random(seed) if seed is not None else random.SystemRandom()
        # Random id base so a restarted client never collides with its predecessor.
        self._next_id = rng.getrandbits(62) << 1
        self.stats = ClientStats()
        self._outcomes: collections.deque[tuple[float, bool]] = collections.deque()
        self._alternate_until = 0.0
        self._srtt: float | None = None
        self._rttvar = 0.0

    def close(self) -> None:
        self.sel.close()
        self.sock.close()

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- overload tracking -----------------------------------------------

    def _note(self, now: float, timed_out: bool) -> None:
        self._outcomes.append((now, timed_out))
        horizon = now - self.config.overload_window
        while self._outcomes and self._outcomes[0][0] < horizon:
            self._outcomes.popleft()

    def timeout_rate(self) -> float:
        if not self._outcomes:
            return 0.0
        return sum(1 for _, t in self._outcomes if t) / len(self._outcomes)

    def use_alternate(self, now: float | None = None) -> bool:
        cfg = self.config
        now = time.monotonic() if now is None else now
        if now < self._alternate_until:
            return True
        if len(self._outcomes) >= cfg.overload_min_samples and self.timeout_rate() > cfg.overload_threshold:
            self._alternate_until = now + cfg.overload_window
            self.stats.scheme_switches += 1
            return True
        return False

    # -- round-trip estimate ----------------------------------------------

    def _sample_rtt(self, rtt: float) -> None:
        if self._srtt is None:
            self._srtt, self._rttvar = rtt, rtt / 2
        else:
            self._rttvar += 0.25 * (abs(self._srtt - rtt) - self._rttvar)
            self._srtt += 0.125 * (rtt - self._srtt)

    def current_timeout(self) -> float:
        cfg = self.config
        if self._srtt is None:
            return cfg.timeout_initial
        return min(max(self._srtt + 4 * self._rttvar, cfg.timeout_initial), cfg.timeout_max)

    # -- request building ------------------------------------------------

    def _build(self, call: Call, now: float) -> tuple[int, bytes, tuple, bool]:
        cfg = self.config
        rid = self._next_id
        self._next_id = (self._next_id + 1) & ((1 << 64) - 1)
        alternate = call.op is Op.GET and self.use_alternate(now)
        hint = None
        if cfg.use_hints and not alternate and call.op is Op.GET:
            hint = hint_for_key(call.key)
        value = call.value if call.op in WRITE_OPS and call.op is not Op.DELETE else 0
        req = Request(call.op, rid, call.key, value, call.max_count, hint)
        port = self.scheme.port_for_key(call.key, alternate)
        if alternate:
            self.stats.alternate_gets += 1
        return rid, encode_request(req), (cfg.host, port), alternate

    def _send(self, p: _Pending) -> None:
        try:
            self.sock.sendto(p.packet, p.addr)
        except BlockingIOError:
            pass  # treated like a lost datagram; the timeout resends it
        self.stats.sent += 1

    # -- pipelined execution ---------------------------------------------

    def run(self, calls: list[Call], qd_get: int | None = None, qd_write: int | None = None) -> list[Result]:
        """Execute ``calls`` in order with bounded in-flight windows.

        At most ``qd_get`` GET/PING and ``qd_write`` other requests are in
        flight. A call waits while an earlier call on the same key is still
        outstanding, so per-key order is preserved.
        """
        cfg = self.config
        limits = (qd_get or cfg.qd_get, qd_write or cfg.qd_write)
        results: list[Result | None] = [None] * len(calls)
        pending: dict[int, _Pending] = {}
        in_flight = [0, 0]
        busy: collections.Counter = collections.Counter()
        nxt = 0
        while nxt < len(calls) or pending:
            now = time.monotonic()
            while nxt < len(calls):
                call = calls[nxt]
                cls = 0 if _is_get_class(call.op) else 1
                if in_flight[cls] >= limits[cls] or busy[call.key]:
                    break
                rid, packet, addr, alt = self._build(call, now)
                p = _Pending(nxt, call, packet, addr, now, self.current_timeout(), alt)
                pending[rid] = p
                in_flight[cls] += 1
                busy[call.key] += 1
                self._send(p)
                nxt += 1
            if not pending:
                continue
            wait = max(0.0, min(p.deadline for p in pending.values()) - time.monotonic())
            if self.sel.select(wait):
                self._drain(pending, results, in_flight, busy)
            self._expire(pending, results, in_flight, busy)
        return results  # type: ignore[return-value]

    def _finish(self, rid: int, p: _Pending, res: Result, pending, results, in_flight, busy) -> None:
        del pending[rid]
        res.attempts = p.attempts
        res.retries = p.retries
        res.latency_s = time.monotonic() - p.start
        res.alternate = p.alternate
        results[p.idx] = res
        in_flight[0 if _is_get_class(p.call.op) else 1] -= 1
        busy[p.call.key] -= 1
        if not busy[p.call.key]:
            del busy[p.call.key]

    def _drain(self, pending, results, in_flight, busy) -> None:
        while True:
            try:
                data, _ = self.sock.recvfrom(RECV_BYTES)
            except BlockingIOError:
                return
            try:
                resp = decode_response(data)
            except (DropPacket, MalformedPacket):
                continue
            p = pending.get(resp.request_id)
            if p is None or p.in_backoff:
                self.stats.duplicates += 1
                continue
            now = time.monotonic()
            call = p.call
            if resp.status is Status.RETRY:
                self.stats.retry_status += 1
                p.retries += 1
                if p.retries > self.config.retry_limit:
                    self.stats.failures += 1
                    self._finish(resp.request_id, p, Result(call.op, call.key, None, error="retry limit exceeded"),
                                 pending, results, in_flight, busy)
                    continue
                p.backoff = min(max(p.backoff * 2, self.config.retry_backoff_initial), self.config.retry_backoff_max)
                p.in_backoff = True
                p.deadline = now + p.backoff
                continue
            self._note(now, False)
            if p.attempts == 1 and not p.retries:
                self._sample_rtt(now - p.start)
            if call.op is Op.RANGE and resp.status in (Status.OK, Status.END_OF_RANGE):
                if resp.fragment in p.frags:
                    self.stats.duplicates += 1
                    continue
                p.frags[resp.fragment] = resp.pairs
                if resp.status is Status.END_OF_RANGE:
                    p.last = resp.fragment
                if p.last is None or len(p.frags) < p.last + 1:
                    continue
                pairs = [kv for i in range(p.last + 1) for kv in p.frags[i]]
                res = Result(call.op, call.key, Status.OK, pairs=pairs)
            else:
                res = Result(call.op, call.key, resp.status, resp.value)
            self._finish(resp.request_id, p, res, pending, results, in_flight, busy)

    def _expire(self, pending, results, in_flight, busy) -> None:
        now = time.monotonic()
        cfg = self.config
        for rid, p in list(pending.items()):
            if p.deadline > now:
                continue
            if p.in_backoff:
                # Server asked us to come back later; not a loss.
                p.in_backoff = False
                p.deadline = now + p.timeout
                self._send(p)
                continue
            self.stats.timeouts += 1
            self._note(now, True)
            if p.attempts > cfg.resends:
                self.stats.failures += 1
                self._finish(rid, p, Result(p.call.op, p.call.key, None,
                                            error=f"no response after {p.attempts} attempts"),
                             pending, results, in_flight, busy)
                continue
            p.attempts += 1
            p.timeout = min(p.timeout * 2, cfg.timeout_max)
            p.deadline = now + p.timeout
            self.stats.resends += 1
            self._send(p)

    # -- single-call helpers -----------------------------------------------

    def submit(self, op: Op, key: int, value: int = 0, max_count: int = 0) -> Result:
        res = self.run([Call(Op(op), key, value, max_count)])[0]
        if res.error is not None:
            raise ClientError(f"{Op(op).name} key={key}: {res.error}")
        return res

    def get(self, key: int) -> int | None:
        r = self.submit(Op.GET, key)
        return r.value if r.status is Status.OK else None

    def insert(self, key: int, value: int) -> Status:
        return self.submit(Op.INSERT, key, value).status

    def update(self, key: int, value: int) -> Status:
        return self.submit(Op.UPDATE, key, value).status

    def delete(self, key: int) -> Status:
        return self.submit(Op.DELETE, key).status

    def range(self, key: int, count: int) -> list[tuple[int, int]]:
        return self.submit(Op.RANGE, key, max_count=count).pairs

    def ping(self, key: int = 0) -> bool:
        return self.submit(Op.PING, key).status is Status.OK
