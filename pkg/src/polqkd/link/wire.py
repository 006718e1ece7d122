"""Classical-channel framing and message bodies.

Frame layout: ``[type: u8][length: u32 LE][payload]``.  Bit strings are
packed LSB-first; all integers are little-endian.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

HEADER = struct.Struct("<BI")
MAX_PAYLOAD = 2**32 - 1


class MsgType(enum.IntEnum):
    BASIS_ANNOUNCE = 1
    SIFT_REPLY = 2
    PARITY_REQ = 3
    PARITY_RESP = 4
    VERIFY = 5
    VERIFY_ACK = 6
    PA_SEED = 7
    SESSION_STATS = 8
    ABORT = 9


class FrameError(ValueError):
    """Malformed, truncated or unknown frame."""


@dataclass(frozen=True)
class LinkMessage:
    type: MsgType
    payload: bytes = b""

    @property
    def length(self) -> int:
        return len(self.payload)


def frame_encode(msg: LinkMessage) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise FrameError("payload too large")
    return HEADER.pack(int(MsgType(msg.type)), len(msg.payload)) + bytes(msg.payload)


def frame_decode(data: bytes) -> LinkMessage:
    """Decode exactly one complete frame."""
    msg, used = frame_decode_prefix(data)
    if msg is None:
        raise FrameError(f"truncated frame ({len(data)} bytes)")
    if used != len(data):
        raise FrameError(f"{len(data) - used} trailing bytes after frame")
    return msg


def frame_decode_prefix(data: bytes):
    """Decode the first frame of ``data``; returns ``(msg or None, bytes used)``."""
    if len(data) < HEADER.size:
        return None, 0
    type_byte, length = HEADER.unpack_from(data)
    try:
        mtype = MsgType(type_byte)
    except ValueError:
        raise FrameError(f"unknown message type {type_byte}") from None
    end = HEADER.size + length
    if len(data) < end:
        return None, 0
    return LinkMessage(mtype, bytes(data[HEADER.size : end])), end


# -- payload helpers ------------------------------------------------------------


def pack_bits(bits) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little").tobytes()


def unpack_bits(buf: bytes, count: int) -> np.ndarray:
    if len(buf) != (count + 7) // 8:
        raise FrameError(f"expected {(count + 7) // 8} bytes of packed bits, got {len(buf)}")
    return np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=count, bitorder="little")


class _Reader:
    def __init__(self, payload: bytes):
        self.buf = memoryview(payload)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FrameError("payload shorter than its declared contents")
        out = bytes(self.buf[self.pos : self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(np.dtype(dtype))

    def bits(self, count: int) -> np.ndarray:
        return unpack_bits(self.take((count + 7) // 8), count)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FrameError("unexpected trailing payload bytes")


def _le(arr, dtype) -> bytes:
    return np.asarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


# BASIS_ANNOUNCE: slots_covered u64, count u32, n_x u32, slots u64[count],
# bases bits[count], x outcomes bits[n_x]
def encode_announce(slots_covered: int, slots, bases, x_outcomes) -> bytes:
    slots = np.asarray(slots)
    return (
        struct.pack("<QII", slots_covered, len(slots), len(x_outcomes))
        + _le(slots, np.uint64)
        + pack_bits(bases)
        + pack_bits(x_outcomes)
    )


def decode_announce(payload: bytes):
    r = _Reader(payload)
    covered, count, n_x = r.unpack("QII")
    slots = r.array(np.uint64, count).astype(np.int64)
    bases = r.bits(count)
    x_out = r.bits(n_x)
    r.done()
    return covered, slots, bases, x_out


# SIFT_REPLY: count u32, n_xkeep u32, keep bits[count], x intensity bits[n_xkeep]
def encode_sift_reply(keep, x_intensity) -> bytes:
    return struct.pack("<II", len(keep), len(x_intensity)) + pack_bits(keep) + pack_bits(x_intensity)


def decode_sift_reply(payload: bytes):
    r = _Reader(payload)
    count, n_xk = r.unpack("II")
    keep = r.bits(count).astype(bool)
    x_int = r.bits(n_xk)
    r.done()
    return keep, x_int


# PARITY_REQ: block u32, perm seed u64, passes u8, m u32, ranges i32[m, 3]
def encode_parity_req(block: int, perm_seed: int, passes: int, ranges) -> bytes:
    ranges = np.asarray(ranges).reshape(-1, 3)
    return struct.pack("<IQBI", block, perm_seed, passes, len(ranges)) + _le(ranges, np.int32)


def decode_parity_req(payload: bytes):
    r = _Reader(payload)
    block, seed, passes, m = r.unpack("IQBI")
    ranges = r.array(np.int32, 3 * m).astype(np.int64).reshape(m, 3)
    r.done()
    return block, seed, passes, ranges


# PARITY_RESP: block u32, m u32, parity bits[m]
def encode_parity_resp(block: int, parities) -> bytes:
    return struct.pack("<II", block, len(parities)) + pack_bits(parities)


def decode_parity_resp(payload: bytes):
    r = _Reader(payload)
    block, m = r.unpack("II")
    bits = r.bits(m)
    r.done()
    return block, bits


# VERIFY: block u32, hash seed u64, n_bits u16, tag bits[n_bits]
def encode_verify(block: int, hash_seed: int, tag) -> bytes:
    return struct.pack("<IQH", block, hash_seed, len(tag)) + pack_bits(tag)


def decode_verify(payload: bytes):
    r = _Reader(payload)
    block, seed, n_bits = r.unpack("IQH")
    tag = r.bits(n_bits)
    r.done()
    return block, seed, tag


# VERIFY_ACK: block u32, ok u8
def encode_verify_ack(block: int, ok: bool) -> bytes:
    return struct.pack("<IB", block, int(ok))


def decode_verify_ack(payload: bytes):
    r = _Reader(payload)
    block, ok = r.unpack("IB")
    r.done()
    return block, bool(ok)


# PA_SEED: l u32, seed length u64, prng seed u64, counter u32, seed bits
def encode_pa_seed(l: int, prng_seed: int, counter: int, seed_bits) -> bytes:
    return struct.pack("<IQQI", l, len(seed_bits), prng_seed, counter) + pack_bits(seed_bits)


def decode_pa_seed(payload: bytes):
    r = _Reader(payload)
    l, n_seed, prng_seed, counter = r.unpack("IQQI")
    bits = r.bits(n_seed)
    r.done()
    return l, prng_seed, counter, bits


# SESSION_STATS: n_z u64[2], n_x u64[2], m_x u64[2], m_z_total u64,
# leak u64, blocks_failed u32, slots_sent u64
_STATS = struct.Struct("<8QIQ")


@dataclass(frozen=True)
class StatsBody:
    n_z: tuple
    n_x: tuple
    m_x: tuple
    m_z_total: int
    leak: int
    blocks_failed: int
    slots_sent: int


def encode_stats(s: StatsBody) -> bytes:
    return _STATS.pack(*s.n_z, *s.n_x, *s.m_x, s.m_z_total, s.leak, s.blocks_failed, s.slots_sent)


def decode_stats(payload: bytes) -> StatsBody:
    if len(payload) != _STATS.size:
        raise FrameError("bad SESSION_STATS length")
    v = _STATS.unpack(payload)
    return StatsBody(v[0:2], v[2:4], v[4:6], v[6], v[7], v[8], v[9])
