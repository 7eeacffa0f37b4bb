"""Fixed-layout UDP request/response packets and key-to-port steering.

Request (36 bytes, little-endian)::

    0  u16 magic 0xD9A5     2  u8 version      3  u8 op     4  u8 flags
    5  u8 bloom0  6 u8 bloom1  7 u8 bloom2  8 u8 bucket  9  3 bytes zero
    12 u64 request_id      20 u64 key         28 u64 value | max_count

Response header (24 bytes)::

    0  u16 magic   2 u8 version   3 u8 op   4 u8 status   5 u8 flags
    6  u16 fragment            8 u64 request_id          16 u64 key

followed by ``u64 value`` for point operations, or by ``u16 pair_count``,
six zero bytes and ``pair_count`` (key, value) u64 pairs for RANGE.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

MAGIC = 0xD9A5
VERSION = 1
FLAG_HINT = 0x01
MAX_RANGE_PAIRS = 64
MTU_PAYLOAD = 1472
CACHE_BUCKETS = 24
U64 = (1 << 64) - 1

_REQ = struct.Struct("<HBBB4B3xQQQ")
_RESP_HEAD = struct.Struct("<HBBBBHQQ")
_VALUE = struct.Struct("<Q")
_COUNT = struct.Struct("<H6x")
_PAIR = struct.Struct("<QQ")

REQUEST_SIZE = _REQ.size
POINT_RESPONSE_SIZE = _RESP_HEAD.size + _VALUE.size
RANGE_RESPONSE_BASE = _RESP_HEAD.size + _COUNT.size


class Op(enum.IntEnum):
    GET = 0
    INSERT = 1
    UPDATE = 2
    DELETE = 3
    RANGE = 4
    PING = 5


class Status(enum.IntEnum):
    OK = 0
    NOT_FOUND = 1
    RETRY = 2
    MALFORMED = 3
    END_OF_RANGE = 4


WRITE_OPS = frozenset({Op.INSERT, Op.UPDATE, Op.DELETE})


class DropPacket(Exception):
    """Unknown magic or version: the datagram is ignored without a reply."""


class MalformedPacket(ValueError):
    def __init__(self, reason: str, request_id: int | None = None, op: int = 0) -> None:
        super().__init__(reason)
        self.request_id = request_id
        self.op = op


@dataclass(frozen=True, slots=True)
class CacheHint:
    bloom: tuple[int, int, int]
    bucket: int


@dataclass(frozen=True, slots=True)
class Request:
    op: Op
    request_id: int
    key: int
    value: int = 0
    max_count: int = 0
    hint: CacheHint | None = None


@dataclass(frozen=True, slots=True)
class Response:
    op: int
    status: Status
    request_id: int
    key: int
    value: int = 0
    pairs: tuple[tuple[int, int], ...] = ()
    fragment: int = 0
    flags: int = 0


def _check_u64(name: str, v: int) -> None:
    if not 0 <= v <= U64:
        raise ValueError(f"{name} out of u64 range: {v}")


def encode_request(req: Request) -> bytes:
    _check_u64("request_id", req.request_id)
    _check_u64("key", req.key)
    op = Op(req.op)
    if op is Op.RANGE:
        if not 1 <= req.max_count <= 0xFFFF:
            raise ValueError(f"max_count out of range: {req.max_count}")
        payload = req.max_count
    elif op in WRITE_OPS and op is not Op.DELETE:
        _check_u64("value", req.value)
        payload = req.value
    else:
        payload = 0
    flags = 0
    b0 = b1 = b2 = bucket = 0
    if req.hint is not None:
        flags |= FLAG_HINT
        b0, b1, b2 = req.hint.bloom
        bucket = req.hint.bucket
        if not all(0 <= b <= 255 for b in (b0, b1, b2)) or not 0 <= bucket < CACHE_BUCKETS:
            raise ValueError(f"bad cache hint {req.hint}")
    return _REQ.pack(MAGIC, VERSION, op, flags, b0, b1, b2, bucket, req.request_id, req.key, payload)


def decode_request(data: bytes) -> Request:
    """Parse a request datagram.

    Raises :class:`DropPacket` for foreign traffic and :class:`MalformedPacket`
    for anything else that does not satisfy the layout.
    """
    if len(data) < 3:
        raise DropPacket("runt datagram")
    magic, version = struct.unpack_from("<HB", data)
    if magic != MAGIC or version != VERSION:
        raise DropPacket("foreign magic/version")
    rid = struct.unpack_from("<Q", data, 12)[0] if len(data) >= 20 else None
    if len(data) != REQUEST_SIZE:
        raise MalformedPacket(f"request length {len(data)} != {REQUEST_SIZE}", rid)
    _, _, op_raw, flags, b0, b1, b2, bucket, rid, key, payload = _REQ.unpack(data)
    if data[9:12] != b"\0\0\0":
        raise MalformedPacket("reserved bytes set", rid, op_raw)
    try:
        op = Op(op_raw)
    except ValueError:
        raise MalformedPacket(f"unknown op {op_raw}", rid, op_raw) from None
    if flags & ~FLAG_HINT:
        raise MalformedPacket(f"unknown flags {flags:#x}", rid, op)
    hint = None
    if flags & FLAG_HINT:
        if bucket >= CACHE_BUCKETS:
            raise MalformedPacket(f"bucket {bucket} out of range", rid, op)
        hint = CacheHint((b0, b1, b2), bucket)
    elif b0 or b1 or b2 or bucket:
        raise MalformedPacket("hint bytes without hint flag", rid, op)
    value = max_count = 0
    if op is Op.RANGE:
        if not 1 <= payload <= 0xFFFF:
            raise MalformedPacket(f"max_count {payload} out of range", rid, op)
        max_count = payload
    elif op in (Op.INSERT, Op.UPDATE):
        value = payload
    elif payload:
        raise MalformedPacket(f"{op.name} carries a payload", rid, op)
    return Request(op, rid, key, value, max_count, hint)


def encode_response(resp: Response) -> bytes:
    _check_u64("request_id", resp.request_id)
    head = _RESP_HEAD.pack(
        MAGIC, VERSION, resp.op, Status(resp.status), resp.flags, resp.fragment, resp.request_id, resp.key
    )
    if resp.op == Op.RANGE:
        n = len(resp.pairs)
        if n > MAX_RANGE_PAIRS:
            raise ValueError(f"{n} pairs exceed {MAX_RANGE_PAIRS} per packet")
        body = _COUNT.pack(n) + b"".join(_PAIR.pack(k, v) for k, v in resp.pairs)
        return head + body
    return head + _VALUE.pack(resp.value)


def decode_response(data: bytes) -> Response:
    if len(data) < _RESP_HEAD.size:
        raise MalformedPacket(f"response length {len(data)} below header size")
    magic, version, op, status, flags, frag, rid, key = _RESP_HEAD.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise DropPacket("foreign magic/version")
    try:
        status = Status(status)
    except ValueError:
        raise MalformedPacket(f"unknown status {status}", rid) from None
    if op not in Op._value2member_map_ and status is not Status.MALFORMED:
        raise MalformedPacket(f"unknown op {op}", rid)
    if op == Op.RANGE:
        if len(data) < RANGE_RESPONSE_BASE:
            raise MalformedPacket("truncated range response", rid)
        (n,) = _COUNT.unpack_from(data, _RESP_HEAD.size)
        if n > MAX_RANGE_PAIRS:
            raise MalformedPacket(f"pair count {n} above {MAX_RANGE_PAIRS}", rid)
        if len(data) != RANGE_RESPONSE_BASE + n * _PAIR.size:
            raise MalformedPacket("range response length mismatch", rid)
        pairs = tuple(_PAIR.iter_unpack(data[RANGE_RESPONSE_BASE:]))
        return Response(op, status, rid, key, 0, pairs, frag, flags)
    if len(data) != POINT_RESPONSE_SIZE:
        raise MalformedPacket("point response length mismatch", rid)
    (value,) = _VALUE.unpack_from(data, _RESP_HEAD.size)
    return Response(op, status, rid, key, value, (), frag, flags)


# -- steering -------------------------------------------------------------


def mix_primary(key: int) -> int:
    z = (key + 0x9E3779B97F4A7C15) & U64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & U64
    return z ^ (z >> 31)


def mix_alternate(key: int) -> int:
    z = key ^ (key >> 33)
    z = (z * 0xFF51AFD7ED558CCD) & U64
    z ^= z >> 33
    z = (z * 0xC4CEB9FE1A85EC53) & U64
    return z ^ (z >> 33)


def hint_for_key(key: int) -> CacheHint:
    """Cache hint from the primary mix: three bloom bit indices and a bucket."""
    h = mix_primary(key)
    return CacheHint(((h >> 32) & 0xFF, (h >> 40) & 0xFF, (h >> 48) & 0xFF), (h >> 56) % CACHE_BUCKETS)


@dataclass(frozen=True)
class SteeringScheme:
    base_port: int
    threads: int

    def __post_init__(self) -> None:
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def thread_for(self, key: int, alternate: bool = False) -> int:
        h = mix_alternate(key) if alternate else mix_primary(key)
        return h % self.threads

    def port_for_key(self, key: int, alternate: bool = False) -> int:
        return self.base_port + self.thread_for(key, alternate)


def port_for_key(key: int, scheme: SteeringScheme, alternate: bool = False) -> int:
    return scheme.port_for_key(key, alternate)
