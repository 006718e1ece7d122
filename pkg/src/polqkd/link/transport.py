"""Reliable ordered duplex transports carrying framed messages.

Both transports move raw frame bytes; endpoints encode and decode with
:mod:`polqkd.link.wire`.  A :class:`Tap` sees every frame in send order.
"""

from __future__ import annotations

import queue
import socket
import threading
from dataclasses import dataclass, field

from .wire import HEADER, FrameError, LinkMessage, MsgType, frame_decode, frame_decode_prefix, frame_encode

DEFAULT_TIMEOUT = 120.0


class TransportError(RuntimeError):
    """Peer went away or a receive timed out."""


@dataclass
class TapRecord:
    sender: str
    type: MsgType
    length: int
    payload: bytes


@dataclass
class Tap:
    """Passive recorder of every frame sent on a link."""

    keep_payloads: bool = True
    records: list[TapRecord] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def see(self, sender: str, frame: bytes) -> None:
        msg = frame_decode(frame)
        with self.lock:
            self.records.append(TapRecord(sender, msg.type, msg.length, msg.payload if self.keep_payloads else b""))

    def transcript(self) -> bytes:
        """Deterministic byte transcript: sender tag plus frame, in send order."""
        out = bytearray()
        for r in self.records:
            out += r.sender.encode()[:1] + frame_encode(LinkMessage(r.type, r.payload))
        return bytes(out)


class Endpoint:
    """One side of a duplex link."""

    def __init__(self, name: str, tap: Tap | None = None, timeout: float = DEFAULT_TIMEOUT):
        self.name = name
        self.tap = tap
        self.timeout = timeout

    def send(self, msg: LinkMessage) -> None:
        frame = frame_encode(msg)
        if self.tap is not None:
            self.tap.see(self.name, frame)
        self._send_frame(frame)

    def recv(self) -> LinkMessage:
        return frame_decode(self._recv_frame())

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class QueueEndpoint(Endpoint):
    def __init__(self, name, inbox: queue.Queue, outbox: queue.Queue, tap=None, timeout=DEFAULT_TIMEOUT):
        super().__init__(name, tap, timeout)
        self.inbox = inbox
        self.outbox = outbox

    def _send_frame(self, frame: bytes) -> None:
        self.outbox.put(frame)

    def _recv_frame(self) -> bytes:
        try:
            frame = self.inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise TransportError(f"{self.name}: receive timed out") from None
        if frame is None:
            raise TransportError(f"{self.name}: peer closed the link")
        return frame

    def close(self) -> None:
        self.outbox.put(None)


def queue_pair(tap: Tap | None = None, timeout: float = DEFAULT_TIMEOUT):
    """In-process duplex link; returns ``(alice_end, bob_end)``."""
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return (
        QueueEndpoint("alice", b_to_a, a_to_b, tap, timeout),
        QueueEndpoint("bob", a_to_b, b_to_a, tap, timeout),
    )


class SocketEndpoint(Endpoint):
    def __init__(self, name, sock: socket.socket, tap=None, timeout=DEFAULT_TIMEOUT):
        super().__init__(name, tap, timeout)
        self.sock = sock
        self.sock.settimeout(timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._buf = bytearray()

    def _send_frame(self, frame: bytes) -> None:
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise TransportError(f"{self.name}: send failed: {exc}") from exc

    def _fill(self, n: int) -> None:
        while len(self._buf) < n:
            try:
                chunk = self.sock.recv(max(65536, n - len(self._buf)))
            except socket.timeout:
                raise TransportError(f"{self.name}: receive timed out") from None
            except OSError as exc:
                raise TransportError(f"{self.name}: receive failed: {exc}") from exc
            if not chunk:
                raise TransportError(f"{self.name}: peer closed the link")
            self._buf += chunk

    def _recv_frame(self) -> bytes:
        self._fill(HEADER.size)
        _, length = HEADER.unpack_from(self._buf)
        self._fill(HEADER.size + length)
        msg, used = frame_decode_prefix(self._buf)
        if msg is None:
            raise FrameError("incomplete frame")
        frame = bytes(self._buf[:used])
        del self._buf[:used]
        return frame

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def tcp_pair(tap: Tap | None = None, timeout: float = DEFAULT_TIMEOUT, host: str = "127.0.0.1"):
    """Duplex link over a real TCP loopback connection."""
    with socket.create_server((host, 0)) as server:
        port = server.getsockname()[1]
        client = socket.create_connection((host, port))
        conn, _ = server.accept()
    return SocketEndpoint("alice", conn, tap, timeout), SocketEndpoint("bob", client, tap, timeout)


TRANSPORTS = {"queue": queue_pair, "tcp": tcp_pair}


class OrderViolation(AssertionError):
    pass


def check_order(records: list[TapRecord], blocks_per_pa: int, n_z_ec: int) -> None:
    """Assert the protocol-order invariants on a tapped transcript.

    A PARITY_REQ for block ``b`` needs SIFT_REPLYs that together kept at
    least ``(b + 1) * n_z_ec`` Z bits; PA_SEED needs ``blocks_per_pa``
    positive VERIFY_ACKs; only ABORT may follow an ABORT.
    """
    from .wire import decode_announce, decode_parity_req, decode_sift_reply, decode_verify_ack

    pending_bases = []
    kept_z = 0
    acks_ok = 0
    aborted = False
    for i, r in enumerate(records):
        if aborted and r.type != MsgType.ABORT:
            raise OrderViolation(f"frame {i} ({r.type.name}) sent after ABORT")
        if r.type == MsgType.BASIS_ANNOUNCE:
            pending_bases.append(decode_announce(r.payload)[2])
        elif r.type == MsgType.SIFT_REPLY:
            if not pending_bases:
                raise OrderViolation(f"frame {i}: SIFT_REPLY without an announcement")
            keep, _ = decode_sift_reply(r.payload)
            kept_z += int((keep & (pending_bases.pop(0) == 0)).sum())
        elif r.type == MsgType.PARITY_REQ:
            block = decode_parity_req(r.payload)[0]
            if kept_z < (block + 1) * n_z_ec:
                raise OrderViolation(f"frame {i}: PARITY_REQ for block {block} before its bits were sifted")
        elif r.type == MsgType.VERIFY_ACK:
            acks_ok += decode_verify_ack(r.payload)[1]
        elif r.type == MsgType.PA_SEED and acks_ok < blocks_per_pa:
            raise OrderViolation(f"frame {i}: PA_SEED after only {acks_ok} verified blocks")
        elif r.type == MsgType.ABORT:
            aborted = True
