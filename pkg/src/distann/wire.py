"""Length-prefixed binary frames for shard scoring and query requests.

Every frame is ``u32 payload length | payload``; every payload starts with
``magic u32 = 0xDA17 | version u16 = 1 | type u16 | request_id u64``.
All integers and floats are little-endian.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field

import numpy as np

from distann.errors import BadMagicError, FormatError, TruncatedError

MAGIC = 0xDA17
VERSION = 1
SCORE_REQUEST, SCORE_RESPONSE, QUERY_REQUEST, QUERY_RESPONSE = 1, 2, 3, 4
STATUS_OK, STATUS_PARTIAL, STATUS_ERROR = 0, 1, 2

_LEN = struct.Struct("<I")
_HEADER = struct.Struct("<IHHQ")
_U32 = struct.Struct("<I")
_PAIR = np.dtype([("id", "<u8"), ("dist", "<f4")])
FRAME_OVERHEAD = _LEN.size + _HEADER.size   # 20 bytes
MAX_FRAME = 1 << 30


@dataclass
class ScoreRequest:
    request_id: int
    t: float
    l: int
    keys: np.ndarray           # uint64
    q: np.ndarray              # float32
    q_sdc: np.ndarray          # uint8


@dataclass
class ScoreResponse:
    request_id: int
    status: int
    r_ids: np.ndarray = field(default_factory=lambda: np.empty(0, np.uint64))
    r_dists: np.ndarray = field(default_factory=lambda: np.empty(0, np.float32))
    c_ids: np.ndarray = field(default_factory=lambda: np.empty(0, np.uint64))
    c_dists: np.ndarray = field(default_factory=lambda: np.empty(0, np.float32))
    missing: np.ndarray = field(default_factory=lambda: np.empty(0, np.uint64))


@dataclass
class QueryRequest:
    request_id: int
    q: np.ndarray
    BW: int
    H: int
    k: int
    L: int
    k_head: int


@dataclass
class QueryResponse:
    request_id: int
    status: int
    ids: np.ndarray
    dists: np.ndarray
    io_used: int
    hops_executed: int


def score_request_size(n_keys: int, dim: int, code_len: int) -> int:
    """Frame size in bytes, length prefix included."""
    return FRAME_OVERHEAD + 4 + 4 + 4 + 8 * n_keys + 4 + 4 * dim + 4 + code_len


def score_response_size(r: int, c: int, missing: int) -> int:
    return FRAME_OVERHEAD + 1 + 4 + 12 * r + 4 + 12 * c + 4 + 8 * missing


def _pairs(ids, dists) -> bytes:
    arr = np.empty(len(ids), dtype=_PAIR)
    arr["id"] = ids
    arr["dist"] = dists
    return _U32.pack(len(ids)) + arr.tobytes()


def _frame(msg_type: int, request_id: int, body: bytes) -> bytes:
    payload = _HEADER.pack(MAGIC, VERSION, msg_type, request_id) + body
    return _LEN.pack(len(payload)) + payload


def encode(msg) -> bytes:
    """Serialize a message into one complete frame."""
    if isinstance(msg, ScoreRequest):
        keys = np.asarray(msg.keys, dtype="<u8")
        q = np.asarray(msg.q, dtype="<f4").reshape(-1)
        code = np.asarray(msg.q_sdc, dtype=np.uint8).reshape(-1)
        body = (struct.pack("<fII", msg.t, msg.l, keys.size) + keys.tobytes()
                + _U32.pack(q.size) + q.tobytes() + _U32.pack(code.size) + code.tobytes())
        return _frame(SCORE_REQUEST, msg.request_id, body)
    if isinstance(msg, ScoreResponse):
        missing = np.asarray(msg.missing, dtype="<u8")
        body = (struct.pack("<B", msg.status) + _pairs(msg.r_ids, msg.r_dists)
                + _pairs(msg.c_ids, msg.c_dists) + _U32.pack(missing.size) + missing.tobytes())
        return _frame(SCORE_RESPONSE, msg.request_id, body)
    if isinstance(msg, QueryRequest):
        q = np.asarray(msg.q, dtype="<f4").reshape(-1)
        body = (_U32.pack(q.size) + q.tobytes()
                + struct.pack("<5I", msg.BW, msg.H, msg.k, msg.L, msg.k_head))
        return _frame(QUERY_REQUEST, msg.request_id, body)
    if isinstance(msg, QueryResponse):
        body = (struct.pack("<B", msg.status) + _pairs(msg.ids, msg.dists)
                + struct.pack("<II", msg.io_used, msg.hops_executed))
        return _frame(QUERY_RESPONSE, msg.request_id, body)
    raise TypeError(f"cannot encode {type(msg).__name__}")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedError(f"payload ends at {len(self.buf)}, needed {self.off + n}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def array(self, dtype, n: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * n), dtype=dt).copy()

    def pairs(self):
        arr = self.array(_PAIR, self.u32())
        return arr["id"].astype(np.uint64), arr["dist"].astype(np.float32)

    def done(self) -> None:
        if self.off != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.off} trailing bytes in payload")


def decode_payload(payload: bytes):
    rd = _Reader(payload)
    magic, version, msg_type, rid = rd.unpack("<IHHQ")
    if magic != MAGIC:
        raise BadMagicError(f"bad frame magic {magic:#x}")
    if version != VERSION:
        raise FormatError(f"unsupported protocol version {version}")
    if msg_type == SCORE_REQUEST:
        t, l, n = rd.unpack("<fII")
        keys = rd.array("<u8", n).astype(np.uint64)
        q = rd.array("<f4", rd.u32()).astype(np.float32)
        code = rd.array(np.uint8, rd.u32())
        msg = ScoreRequest(rid, float(t), l, keys, q, code)
    elif msg_type == SCORE_RESPONSE:
        (status,) = rd.unpack("<B")
        r_ids, r_d = rd.pairs()
        c_ids, c_d = rd.pairs()
        missing = rd.array("<u8", rd.u32()).astype(np.uint64)
        msg = ScoreResponse(rid, status, r_ids, r_d, c_ids, c_d, missing)
    elif msg_type == QUERY_REQUEST:
        q = rd.array("<f4", rd.u32()).astype(np.float32)
        msg = QueryRequest(rid, q, *rd.unpack("<5I"))
    elif msg_type == QUERY_RESPONSE:
        (status,) = rd.unpack("<B")
        ids, d = rd.pairs()
        io_used, hops = rd.unpack("<II")
        msg = QueryResponse(rid, status, ids, d, io_used, hops)
    else:
        raise FormatError(f"unknown message type {msg_type}")
    rd.done()
    return msg


def decode(frame: bytes):
    """Parse one complete frame (length prefix included)."""
    if len(frame) < _LEN.size:
        raise TruncatedError("frame shorter than its length prefix")
    (n,) = _LEN.unpack_from(frame)
    if len(frame) != _LEN.size + n:
        raise TruncatedError(f"frame declares {n} payload bytes, carries {len(frame) - _LEN.size}")
    return decode_payload(frame[_LEN.size:])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise ConnectionError("peer closed the connection mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes | None:
    """Read one frame's payload; ``None`` on a clean close before any byte."""
    first = sock.recv(_LEN.size)
    if not first:
        return None
    head = first if len(first) == _LEN.size else first + _recv_exact(sock, _LEN.size - len(first))
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise FormatError(f"frame of {n} bytes exceeds the limit")
    return _recv_exact(sock, n)


def send_msg(sock: socket.socket, msg) -> int:
    data = encode(msg)
    sock.sendall(data)
    return len(data)


def recv_msg(sock: socket.socket):
    payload = read_frame(sock)
    if payload is None:
        raise ConnectionError("connection closed")
    return decode_payload(payload)
