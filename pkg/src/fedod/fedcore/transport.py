"""Message framing and the two transports (in-process queues, loopback TCP).

Wire format "FDP1", all integers little-endian:

    magic   4 bytes  b"FDP1"
    kind    u8       1=JoinReq 2=Broadcast 3=Update 4=StopNotice 5=Error
    round   u32
    length  u32      payload byte count
    payload length bytes
    crc     u32      CRC-32 (IEEE) over kind+round+length+payload

Payloads:
    JoinReq     u16 id_len, id utf8, u32 num_samples
    Broadcast   weights in FDW1
    Update      u16 id_len, id utf8, u32 num_samples, u8 has_accuracy,
                f64 accuracy, weights in FDW1
    StopNotice  u32 rounds_used, final weights in FDW1
    Error       u16 code, u16 msg_len, msg utf8

Both transports move the same encoded Message objects; TCP additionally
frames them onto the socket, so an in-process run and a TCP run execute
identical payload round-trips. Delivery is exactly-once and in-order per
connection.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
import zlib
from dataclasses import dataclass

from ..params import ParamSet, deserialize, serialize
from .protocol import ClientUpdate, TransportFailure

WIRE_MAGIC = b"FDP1"
MAX_PAYLOAD = 256 * 1024 * 1024  # corrupt length fields must not drive allocation

ERR_PROTOCOL_VIOLATION = 1
ERR_INTERNAL = 2


class MessageKind(enum.IntEnum):
    JOIN_REQ = 1
    BROADCAST = 2
    UPDATE = 3
    STOP_NOTICE = 4
    ERROR = 5


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    round: int
    payload: bytes


def frame(msg: Message) -> bytes:
    body = struct.pack("<BII", msg.kind, msg.round, len(msg.payload)) + msg.payload
    return WIRE_MAGIC + body + struct.pack("<I", zlib.crc32(body))


def parse_frame(read_exact) -> Message:
    """Read one frame via `read_exact(n) -> bytes`; raises TransportFailure."""
    magic = read_exact(4)
    if magic != WIRE_MAGIC:
        raise TransportFailure(f"bad frame magic {magic!r}")
    header = read_exact(9)
    kind, round_, length = struct.unpack("<BII", header)
    if length > MAX_PAYLOAD:
        raise TransportFailure(f"frame claims {length} payload bytes (cap {MAX_PAYLOAD})")
    payload = read_exact(length)
    (crc,) = struct.unpack("<I", read_exact(4))
    if zlib.crc32(header + payload) != crc:
        raise TransportFailure("frame checksum mismatch")
    try:
        kind = MessageKind(kind)
    except ValueError as e:
        raise TransportFailure(f"unknown message kind {kind}") from e
    return Message(kind, round_, payload)


# ------------------------------------------------------------ payload codecs

def encode_join(client_id: str, num_samples: int) -> Message:
    ident = client_id.encode("utf-8")
    payload = struct.pack("<H", len(ident)) + ident + struct.pack("<I", num_samples)
    return Message(MessageKind.JOIN_REQ, 0, payload)


def decode_join(msg: Message) -> tuple[str, int]:
    (id_len,) = struct.unpack_from("<H", msg.payload, 0)
    ident = msg.payload[2 : 2 + id_len].decode("utf-8")
    (n,) = struct.unpack_from("<I", msg.payload, 2 + id_len)
    return ident, n


def encode_broadcast(round_: int, weights: ParamSet) -> Message:
    return Message(MessageKind.BROADCAST, round_, serialize(weights))


def decode_broadcast(msg: Message) -> ParamSet:
    return deserialize(msg.payload)


def encode_update(update: ClientUpdate) -> Message:
    ident = update.client_id.encode("utf-8")
    has_acc = update.reported_accuracy is not None
    payload = (
        struct.pack("<H", len(ident))
        + ident
        + struct.pack("<IBd", update.num_samples, has_acc,
                      update.reported_accuracy if has_acc else 0.0)
        + serialize(update.weights)
    )
    return Message(MessageKind.UPDATE, update.round, payload)


def decode_update(msg: Message) -> ClientUpdate:
    (id_len,) = struct.unpack_from("<H", msg.payload, 0)
    ident = msg.payload[2 : 2 + id_len].decode("utf-8")
    n, has_acc, acc = struct.unpack_from("<IBd", msg.payload, 2 + id_len)
    weights = deserialize(msg.payload[2 + id_len + 13 :])
    return ClientUpdate(ident, msg.round, weights, n, acc if has_acc else None)


def encode_stop(round_: int, rounds_used: int, weights: ParamSet) -> Message:
    payload = struct.pack("<I", rounds_used) + serialize(weights)
    return Message(MessageKind.STOP_NOTICE, round_, payload)


def decode_stop(msg: Message) -> tuple[int, ParamSet]:
    (rounds_used,) = struct.unpack_from("<I", msg.payload, 0)
    return rounds_used, deserialize(msg.payload[4:])


def encode_error(round_: int, code: int, text: str) -> Message:
    blob = text.encode("utf-8")
    return Message(MessageKind.ERROR, round_,
                   struct.pack("<HH", code, len(blob)) + blob)


def decode_error(msg: Message) -> tuple[int, str]:
    code, length = struct.unpack_from("<HH", msg.payload, 0)
    return code, msg.payload[4 : 4 + length].decode("utf-8")


# --------------------------------------------------------------- transports

class ServerHub:
    """What the serve loop needs: receive (sender_key, Message) from anyone,
    send a Message to one sender_key."""

    def recv(self, timeout: float) -> tuple[object, Message]:
        raise NotImplementedError

    def send(self, key, msg: Message) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class ClientEndpoint:
    """What a client loop needs: send to the server, receive from it."""

    def send(self, msg: Message) -> None:
        raise NotImplementedError

    def recv(self, timeout: float) -> Message:
        raise NotImplementedError

    def close(self) -> None:
        pass


class InProcessHub(ServerHub):
    """Queues in one process; messages still carry encoded payload bytes."""

    def __init__(self):
        self.inbox: queue.Queue = queue.Queue()
        self._client_queues: dict[object, queue.Queue] = {}
        self._next_key = 0

    def connect(self) -> "InProcessClientEndpoint":
        key = self._next_key
        self._next_key += 1
        q: queue.Queue = queue.Queue()
        self._client_queues[key] = q
        return InProcessClientEndpoint(self, key, q)

    def recv(self, timeout: float) -> tuple[object, Message]:
        try:
            return self.inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportFailure(f"server timed out after {timeout}s waiting for a message")

    def send(self, key, msg: Message) -> None:
        self._client_queues[key].put(msg)


class InProcessClientEndpoint(ClientEndpoint):
    def __init__(self, hub: InProcessHub, key, inbox: queue.Queue):
        self._hub = hub
        self._key = key
        self._inbox = inbox

    def send(self, msg: Message) -> None:
        self._hub.inbox.put((self._key, msg))

    def recv(self, timeout: float) -> Message:
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportFailure(f"client timed out after {timeout}s waiting for the server")


def _read_exact(sock: socket.socket):
    def reader(n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            try:
                chunk = sock.recv(remaining)
            except OSError as e:
                raise TransportFailure(f"socket read failed: {e}") from e
            if not chunk:
                raise TransportFailure("connection closed mid-frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    return reader


class TcpServerHub(ServerHub):
    """Accepts loopback connections; one reader thread per connection feeds
    a single inbox, so server_step applications stay serialized."""

    def __init__(self, bind: str, expected_connections: int):
        host, _, port = bind.rpartition(":")
        self._listener = socket.create_server((host or "127.0.0.1", int(port or 0)))
        self._listener.settimeout(30.0)
        self.address = "%s:%d" % self._listener.getsockname()[:2]
        self.inbox: queue.Queue = queue.Queue()
        self._conns: dict[object, socket.socket] = {}
        self._locks: dict[object, threading.Lock] = {}
        self._threads: list[threading.Thread] = []
        self._expected = expected_connections
        self._accepting = threading.Thread(target=self._accept_loop, daemon=True)
        self._accepting.start()

    def _accept_loop(self):
        for key in range(self._expected):
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.settimeout(None)
            self._conns[key] = conn
            self._locks[key] = threading.Lock()
            t = threading.Thread(target=self._reader, args=(key, conn), daemon=True)
            t.start()
            self._threads.append(t)

    def _reader(self, key, conn):
        read = _read_exact(conn)
        while True:
            try:
                msg = parse_frame(read)
            except TransportFailure as e:
                self.inbox.put((key, e))
                return
            self.inbox.put((key, msg))

    def recv(self, timeout: float) -> tuple[object, Message]:
        try:
            key, item = self.inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportFailure(f"server timed out after {timeout}s waiting for a frame")
        if isinstance(item, TransportFailure):
            raise item
        return key, item

    def send(self, key, msg: Message) -> None:
        with self._locks[key]:
            try:
                self._conns[key].sendall(frame(msg))
            except OSError as e:
                raise TransportFailure(f"socket write failed: {e}") from e

    def close(self) -> None:
        for conn in self._conns.values():
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        self._listener.close()


class TcpClientEndpoint(ClientEndpoint):
    def __init__(self, address: str, timeout: float = 30.0):
        host, _, port = address.rpartition(":")
        try:
            self._sock = socket.create_connection((host, int(port)), timeout=timeout)
        except OSError as e:
            raise TransportFailure(f"cannot connect to {address}: {e}") from e
        self._sock.settimeout(None)
        self._read = _read_exact(self._sock)
        self._lock = threading.Lock()

    def send(self, msg: Message) -> None:
        with self._lock:
            try:
                self._sock.sendall(frame(msg))
            except OSError as e:
                raise TransportFailure(f"socket write failed: {e}") from e

    def recv(self, timeout: float) -> Message:
        self._sock.settimeout(timeout)
        try:
            return parse_frame(self._read)
        finally:
            self._sock.settimeout(None)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
