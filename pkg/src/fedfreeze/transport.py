"""Client/aggregator messaging with exact byte accounting.

Wire frame (all integers little-endian)::

    "FFMS" | u32 payload length | u8 kind | payload
    payload = u32 round | u32 sender | u32 meta length | meta (UTF-8 JSON) | body

Model-bearing bodies are FFRZ blobs (see :mod:`fedfreeze.registry`).  The
ledger counts parameter bytes (4 per value) as traffic and everything else
in the payload as overhead; frame headers are not counted.

The same codec and ledger back both the in-process loopback hub and the TCP
hub, so measurements do not depend on the backend.
"""
import csv
import io
import json
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import TransportError
from .registry import HEADER_BYTES, MAGIC, deserialize_model, serialize_model

log = logging.getLogger(__name__)

FRAME_MAGIC = b"FFMS"
_FRAME = struct.Struct("<4sIB")
_PAYLOAD = struct.Struct("<III")
SERVER_ID = 0xFFFFFFFF
ANY_CLIENT = 0xFFFFFFFE
UPLINK = "uplink"
DOWNLINK = "downlink"


class MessageKind(IntEnum):
    GLOBAL_MODEL = 1
    PARTIAL_UPDATE = 2
    ROUND_START = 3
    ROUND_ACK = 4
    ERROR = 5


@dataclass
class Message:
    kind: MessageKind
    round: int
    sender: int
    meta: dict = field(default_factory=dict)
    body: bytes = b""

    @property
    def payload(self) -> bytes:
        meta = json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _PAYLOAD.pack(self.round, self.sender, len(meta)) + meta + self.body

    @property
    def payload_byte_count(self) -> int:
        return len(self.payload)

    @property
    def tensor_bytes(self) -> int:
        """Parameter bytes carried in the body (0 for control messages)."""
        if len(self.body) >= HEADER_BYTES and self.body[:4] == MAGIC:
            (n_params,) = struct.unpack_from("<I", self.body, 12)
            return 4 * n_params
        return 0

    @classmethod
    def from_payload(cls, kind: int, payload: bytes) -> "Message":
        if len(payload) < _PAYLOAD.size:
            raise TransportError("payload shorter than its header")
        rnd, sender, meta_len = _PAYLOAD.unpack_from(payload, 0)
        end = _PAYLOAD.size + meta_len
        if end > len(payload):
            raise TransportError("truncated message metadata")
        try:
            meta = json.loads(payload[_PAYLOAD.size:end].decode("utf-8"))
            kind = MessageKind(kind)
        except (ValueError, UnicodeDecodeError) as exc:
            raise TransportError(f"malformed message: {exc}") from None
        return cls(kind, rnd, sender, meta, bytes(payload[end:]))


def encode_frame(msg: Message) -> bytes:
    payload = msg.payload
    return _FRAME.pack(FRAME_MAGIC, len(payload), int(msg.kind)) + payload


def decode_frame(frame: bytes) -> Message:
    if len(frame) < _FRAME.size:
        raise TransportError("truncated frame header")
    magic, length, kind = _FRAME.unpack_from(frame, 0)
    if magic != FRAME_MAGIC:
        raise TransportError(f"bad frame magic {magic!r}")
    if len(frame) != _FRAME.size + length:
        raise TransportError("frame length mismatch")
    return Message.from_payload(kind, frame[_FRAME.size:])


# --- message constructors ---------------------------------------------------------


def global_model_message(t, state, meta=None) -> Message:
    return Message(MessageKind.GLOBAL_MODEL, t, SERVER_ID, dict(meta or {}), serialize_model(state))


def partial_update_message(update) -> Message:
    meta = {
        "trained_layers": sorted(update.trained_layers),
        "sample_count": int(update.sample_count),
        "loss": float(update.loss),
        "accuracy": float(update.accuracy),
    }
    return Message(MessageKind.PARTIAL_UPDATE, update.round, update.client_id, meta,
                   serialize_model(update.tensors))


def update_from_message(msg: Message):
    from .client import PartialUpdate

    if msg.kind != MessageKind.PARTIAL_UPDATE:
        raise TransportError(f"expected a partial update, got {msg.kind.name}")
    m = msg.meta
    return PartialUpdate(
        round=msg.round,
        client_id=msg.sender,
        trained_layers=frozenset(m["trained_layers"]),
        tensors=deserialize_model(msg.body),
        sample_count=int(m["sample_count"]),
        loss=float(m["loss"]),
        accuracy=float(m["accuracy"]),
    )


def error_message(t, sender, text) -> Message:
    return Message(MessageKind.ERROR, t, sender, {"error": str(text)})


# --- ledger -------------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    client: int
    direction: str
    kind: str
    bytes: int
    overhead_bytes: int


class TrafficLedger:
    """Append-only record of every message the aggregator sent or received."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: list[LedgerEntry] = []

    def record(self, msg: Message, direction: str, client: int) -> LedgerEntry:
        tensor = msg.tensor_bytes
        entry = LedgerEntry(msg.round, client, direction, msg.kind.name, tensor,
                            msg.payload_byte_count - tensor)
        with self._lock:
            self._entries.append(entry)
        return entry

    @property
    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._entries)

    def _select(self, round=None, direction=None, client=None):
        return [e for e in self.entries
                if (round is None or e.round == round)
                and (direction is None or e.direction == direction)
                and (client is None or e.client == client)]

    def total(self, round=None, direction=None, client=None) -> int:
        return sum(e.bytes for e in self._select(round, direction, client))

    def overhead(self, round=None, direction=None, client=None) -> int:
        return sum(e.overhead_bytes for e in self._select(round, direction, client))

    def to_csv(self) -> str:
        """Rows sorted by (round, direction, client), so arrival order does not matter."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "client", "direction", "bytes"])
        for e in sorted(self.entries, key=lambda e: (e.round, e.direction, e.client)):
            w.writerow([e.round, e.client, e.direction, e.bytes])
        return buf.getvalue()


# --- channels -----------------------------------------------------------------------


class LoopbackChannel:
    """In-process FIFO carrying encoded frames; safe for many senders."""

    _CLOSED = object()

    def __init__(self):
        self._q: queue.Queue = queue.Queue()

    def send(self, msg: Message) -> None:
        self._q.put(encode_frame(msg))

    def receive(self, timeout=None) -> Message:
        try:
            frame = self._q.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no message before timeout") from None
        if frame is self._CLOSED:
            raise TransportError("channel closed")
        return decode_frame(frame)

    def close(self) -> None:
        self._q.put(self._CLOSED)


def _recv_exact(sock, n) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise TransportError("connection closed")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class TcpChannel:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._send_lock = threading.Lock()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, msg: Message) -> None:
        data = encode_frame(msg)
        with self._send_lock:
            try:
                self.sock.sendall(data)
            except OSError as exc:
                raise TransportError(f"send failed: {exc}") from exc

    def receive(self, timeout=None) -> Message:
        self.sock.settimeout(timeout)
        try:
            head = _recv_exact(self.sock, _FRAME.size)
            _, length, _ = _FRAME.unpack(head)
            self.sock.settimeout(None)
            return decode_frame(head + _recv_exact(self.sock, length))
        except socket.timeout:
            raise TimeoutError("no message before timeout") from None
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from exc

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)


# --- client side --------------------------------------------------------------------


def serve_client(runtime, down, up) -> None:
    """Client message loop: train on every received global model until shutdown."""
    cid = runtime.cfg.client_id
    while True:
        try:
            msg = down.receive()
        except TransportError:
            return
        if msg.kind == MessageKind.ROUND_START and msg.meta.get("shutdown"):
            up.send(Message(MessageKind.ROUND_ACK, msg.round, cid, {"shutdown": True}))
            return
        if msg.kind != MessageKind.GLOBAL_MODEL:
            continue
        try:
            update = runtime.client_update(deserialize_model(msg.body), msg.round)
            reply = partial_update_message(update)
        except Exception as exc:  # reported to the aggregator, which applies the quorum rule
            log.warning("client %d failed in round %d: %s", cid, msg.round, exc)
            reply = error_message(msg.round, cid, f"{type(exc).__name__}: {exc}")
        up.send(reply)


def connect_client(addr: str, runtime_factory, client_id=None, retry_for=30.0) -> None:
    """Join a TCP aggregator, receive an id, then serve rounds until shutdown."""
    host, port = parse_address(addr)
    deadline = time.monotonic() + retry_for
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=10)
            break
        except OSError:
            if time.monotonic() > deadline:
                raise TransportError(f"could not connect to {addr}") from None
            time.sleep(0.1)
    sock.settimeout(None)
    chan = TcpChannel(sock)
    try:
        chan.send(Message(MessageKind.ROUND_ACK, 0, ANY_CLIENT if client_id is None else client_id))
        hello = chan.receive(timeout=retry_for)
        if hello.kind != MessageKind.ROUND_START or "client_id" not in hello.meta:
            raise TransportError("unexpected registration reply")
        runtime = runtime_factory(int(hello.meta["client_id"]))
        serve_client(runtime, chan, chan)
    finally:
        chan.close()


# --- aggregator side ----------------------------------------------------------------


class Hub:
    """Aggregator endpoint: unicast to clients, one inbox for all replies."""

    def __init__(self, ledger: TrafficLedger | None = None):
        self.ledger = ledger if ledger is not None else TrafficLedger()
        self._down: dict[int, object] = {}
        self._inbox = None

    @property
    def client_ids(self) -> list[int]:
        return sorted(self._down)

    def send(self, client_id: int, msg: Message) -> None:
        chan = self._down[client_id]
        self.ledger.record(msg, DOWNLINK, client_id)
        chan.send(msg)

    def receive(self, timeout=None) -> Message:
        msg = self._inbox.receive(timeout=timeout)
        if not msg.meta.get("local"):
            self.ledger.record(msg, UPLINK, msg.sender)
        return msg

    def shutdown(self, timeout=10.0) -> None:
        for k in self.client_ids:
            try:
                self._down[k].send(Message(MessageKind.ROUND_START, 0, SERVER_ID, {"shutdown": True}))
            except TransportError:
                pass
        self._join(timeout)

    def _join(self, timeout):
        pass


class LoopbackHub(Hub):
    """Runs each client in its own thread behind in-process channels."""

    def __init__(self, runtimes: dict, ledger=None):
        super().__init__(ledger)
        self._inbox = LoopbackChannel()
        self._threads = []
        for k in sorted(runtimes):
            self._down[k] = LoopbackChannel()
            th = threading.Thread(target=serve_client, args=(runtimes[k], self._down[k], self._inbox),
                                  name=f"client-{k}", daemon=True)
            th.start()
            self._threads.append(th)

    def _join(self, timeout):
        for th in self._threads:
            th.join(timeout)


class _InboxQueue:
    def __init__(self):
        self.q: queue.Queue = queue.Queue()

    def receive(self, timeout=None) -> Message:
        try:
            return self.q.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no message before timeout") from None


class TcpHub(Hub):
    """Listens for ``n_clients`` TCP clients and assigns each an id.

    A client may ask for a specific id in its hello; otherwise ids are given
    out in arrival order.  One reader thread per connection feeds the shared
    inbox; a dropped connection is delivered as an ERROR message.
    """

    def __init__(self, host="127.0.0.1", port=0, ledger=None):
        super().__init__(ledger)
        self._inbox = _InboxQueue()
        self._listener = socket.create_server((host, port))
        self.address = "%s:%d" % self._listener.getsockname()[:2]
        self._readers = []

    def accept(self, n_clients: int, timeout=60.0) -> None:
        self._listener.settimeout(timeout)
        pending = []
        try:
            while len(pending) < n_clients:
                sock, _ = self._listener.accept()
                sock.settimeout(None)
                chan = TcpChannel(sock)
                hello = chan.receive(timeout=timeout)
                if hello.kind != MessageKind.ROUND_ACK:
                    chan.close()
                    continue
                pending.append((hello.sender, chan))
        except socket.timeout:
            raise TransportError(f"only {len(pending)} of {n_clients} clients connected") from None
        free = [k for k in range(n_clients) if k not in {s for s, _ in pending}]
        for want, chan in pending:
            if want < n_clients and want not in self._down:
                k = want
            else:
                k = free.pop(0)
            self._down[k] = chan
            chan.send(Message(MessageKind.ROUND_START, 0, SERVER_ID, {"client_id": k}))
            th = threading.Thread(target=self._read, args=(k, chan), name=f"reader-{k}", daemon=True)
            th.start()
            self._readers.append(th)

    def _read(self, k, chan):
        while True:
            try:
                msg = chan.receive()
            except TransportError as exc:
                lost = error_message(0, k, f"disconnected: {exc}")
                lost.meta.update(local=True, disconnected=True)
                self._inbox.q.put(lost)
                return
            if msg.kind == MessageKind.ROUND_ACK and msg.meta.get("shutdown"):
                return
            self._inbox.q.put(msg)

    def _join(self, timeout):
        for th in self._readers:
            th.join(timeout)
        for chan in self._down.values():
            chan.close()
        self._listener.close()
