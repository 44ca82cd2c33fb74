"""Star-topology collectives between one coordinator and ``p`` workers.

The coordinator is rank 0 and workers are ranks ``1..p``; worker rank ``r`` owns
partition ``r - 1``.  Every message is a frame::

    tag      1 byte
    length   8 bytes, little-endian unsigned, payload byte count
    payload  little-endian float64 values (UTF-8 text for ERROR frames)

Two transports move frames: queues between threads of one process (SMP mode) and
one blocking TCP connection per worker (MPP mode).  Byte counters record payload
bytes only, so the accounting does not depend on the transport.
"""

from __future__ import annotations

import enum
import logging
import queue
import socket
import struct
import time
from collections import Counter
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "Tag",
    "CommError",
    "CommTimeout",
    "ProtocolError",
    "RemoteError",
    "encode_frame",
    "decode_frame",
    "Communicator",
    "inprocess_group",
    "SocketListener",
    "connect_worker",
    "DEFAULT_TIMEOUT",
]

DEFAULT_TIMEOUT = 60.0
_HEADER = struct.Struct("<BQ")
_F8 = np.dtype("<f8")


class Tag(enum.IntEnum):
    HELLO = 1
    CONFIG = 2
    SUM = 3
    MIN = 4
    MAX = 5
    BCAST = 6
    STEP = 7
    STOP = 8
    SV = 9
    ERROR = 10
    ABORT = 11


class CommError(RuntimeError):
    pass


class CommTimeout(CommError):
    pass


class ProtocolError(CommError):
    pass


class RemoteError(CommError):
    """A peer reported a failure through an ERROR frame."""


def encode_frame(tag: int, payload: bytes) -> bytes:
    return _HEADER.pack(int(tag), len(payload)) + payload


def decode_frame(buf: bytes) -> tuple[Tag, bytes]:
    """Decode exactly one frame from ``buf``."""
    if len(buf) < _HEADER.size:
        raise ProtocolError("truncated frame header")
    tag, length = _HEADER.unpack_from(buf)
    try:
        tag = Tag(tag)
    except ValueError:
        raise ProtocolError(f"unknown frame tag {tag}") from None
    if len(buf) - _HEADER.size != length:
        raise ProtocolError(
            f"length field says {length} bytes but {len(buf) - _HEADER.size} follow"
        )
    return tag, bytes(buf[_HEADER.size:])


def _to_payload(values) -> bytes:
    return np.ascontiguousarray(np.asarray(values, dtype=np.float64).ravel(), dtype=_F8).tobytes()


def _from_payload(payload: bytes) -> np.ndarray:
    if len(payload) % 8:
        raise ProtocolError(f"payload of {len(payload)} bytes is not a whole number of float64 values")
    return np.frombuffer(payload, dtype=_F8).astype(np.float64)


# --------------------------------------------------------------------------- transports


class _QueueTransport:
    """One endpoint of the in-process backend."""

    def __init__(self, inboxes: dict[int, queue.Queue], outboxes: dict[int, queue.Queue]):
        self._in = inboxes
        self._out = outboxes

    def send(self, peer: int, frame: bytes) -> None:
        self._out[peer].put(frame)

    def recv(self, peer: int, timeout: float) -> bytes:
        try:
            return self._in[peer].get(timeout=timeout)
        except queue.Empty:
            raise CommTimeout(f"no message from rank {peer} within {timeout:g}s") from None

    def close(self) -> None:
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        try:
            chunk = sock.recv(min(n, 1 << 20))
        except socket.timeout:
            raise CommTimeout("socket receive timed out") from None
        if not chunk:
            raise CommError("connection closed by peer")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def _read_frame(sock: socket.socket) -> bytes:
    head = _recv_exact(sock, _HEADER.size)
    tag, length = _HEADER.unpack(head)
    if tag not in Tag._value2member_map_:
        raise ProtocolError(f"unknown frame tag {tag}")
    return head + _recv_exact(sock, length)


class _SocketTransport:
    def __init__(self, socks: dict[int, socket.socket], timeout: float):
        self._socks = socks
        for s in socks.values():
            s.settimeout(timeout)

    def send(self, peer: int, frame: bytes) -> None:
        try:
            self._socks[peer].sendall(frame)
        except OSError as exc:
            raise CommError(f"send to rank {peer} failed: {exc}") from exc

    def recv(self, peer: int, timeout: float) -> bytes:
        sock = self._socks[peer]
        sock.settimeout(timeout)
        try:
            return _read_frame(sock)
        except CommTimeout:
            raise CommTimeout(f"no message from rank {peer} within {timeout:g}s") from None

    def close(self) -> None:
        for s in self._socks.values():
            try:
                s.close()
            except OSError:
                pass


# --------------------------------------------------------------------------- communicator


class Communicator:
    """One participant's view of the group.

    ``size`` is the worker count ``p`` (workers may leave it unset).  On the
    coordinator the reductions combine worker buffers in rank order ``1..p``; on a
    worker they only send.
    """

    def __init__(self, rank: int, size: int | None, transport, timeout: float = DEFAULT_TIMEOUT):
        if rank < 0 or (rank == 0 and size is None):
            raise ValueError("the coordinator must know the worker count")
        if size is not None and (size < 1 or rank > size):
            raise ValueError(f"rank {rank} outside 0..{size}")
        self.rank = rank
        self.size = size
        self.timeout = timeout
        self._transport = transport
        self.sent: Counter = Counter()  # (peer, tag) -> payload bytes
        self.received: Counter = Counter()

    @property
    def role(self) -> str:
        return "coordinator" if self.rank == 0 else "worker"

    @property
    def bytes_sent(self) -> int:
        return sum(self.sent.values())

    @property
    def bytes_received(self) -> int:
        return sum(self.received.values())

    @property
    def worker_ranks(self) -> range:
        return range(1, self.size + 1)

    # raw frames -------------------------------------------------------------

    def send(self, peer: int, tag: Tag, payload: bytes = b"") -> None:
        self._transport.send(peer, encode_frame(tag, payload))
        self.sent[(peer, Tag(tag))] += len(payload)

    def recv(self, peer: int, timeout: float | None = None) -> tuple[Tag, bytes]:
        tag, payload = decode_frame(self._transport.recv(peer, self.timeout if timeout is None else timeout))
        self.received[(peer, tag)] += len(payload)
        if tag is Tag.ERROR:
            raise RemoteError(f"rank {peer}: {payload.decode('utf-8', 'replace')}")
        if tag is Tag.ABORT and self.rank != 0:
            raise CommError("coordinator aborted the run")
        return tag, payload

    def send_values(self, peer: int, tag: Tag, values) -> None:
        self.send(peer, tag, _to_payload(values))

    def recv_values(self, peer: int, expect: Tag | Sequence[Tag]) -> tuple[Tag, np.ndarray]:
        tag, payload = self.recv(peer)
        allowed = (expect,) if isinstance(expect, Tag) else tuple(expect)
        if tag not in allowed:
            raise ProtocolError(
                f"rank {self.rank} expected {'/'.join(t.name for t in allowed)} from rank {peer}, got {tag.name}"
            )
        return tag, _from_payload(payload)

    # collectives -------------------------------------------------------------

    def _gather(self, tag: Tag) -> list[np.ndarray]:
        bufs = [self.recv_values(r, tag)[1] for r in self.worker_ranks]
        lengths = {len(b) for b in bufs}
        if len(lengths) > 1:
            detail = ", ".join(f"rank {r}: {len(b)}" for r, b in zip(self.worker_ranks, bufs))
            raise ProtocolError(f"{tag.name} buffers differ in length ({detail})")
        return bufs

    def _reduce(self, tag: Tag, local, combine, reply: bool):
        if self.rank != 0:
            self.send_values(0, tag, local)
            if reply:
                return self.recv_values(0, tag)[1]
            return None
        bufs = self._gather(tag)
        out = bufs[0].copy()
        for b in bufs[1:]:
            combine(out, b, out=out)
        if reply:
            self.broadcast(out, tag=tag)
        return out

    def all_reduce_sum(self, local=None, *, reply: bool = False):
        """Element-wise sum at the coordinator, accumulated in rank order."""
        return self._reduce(Tag.SUM, local, np.add, reply)

    def all_reduce_min(self, local=None, *, reply: bool = True):
        return self._reduce(Tag.MIN, local, np.minimum, reply)

    def all_reduce_max(self, local=None, *, reply: bool = False):
        return self._reduce(Tag.MAX, local, np.maximum, reply)

    def broadcast(self, values=None, *, tag: Tag = Tag.BCAST):
        """Coordinator sends ``values`` to every worker; a worker returns what it received."""
        if self.rank != 0:
            return self.recv_values(0, tag)[1]
        payload = _to_payload(values)
        if not payload:
            raise ValueError("empty broadcast")
        for r in self.worker_ranks:
            self.send(r, tag, payload)
        return np.asarray(values, dtype=np.float64)

    def abort(self, reason: str = "") -> None:
        """Best-effort notice to every peer that the run is over."""
        peers = self.worker_ranks if self.rank == 0 else [0]
        tag = Tag.ABORT if self.rank == 0 else Tag.ERROR
        for r in peers:
            try:
                self.send(r, tag, reason.encode("utf-8"))
            except CommError:
                pass

    def close(self) -> None:
        self._transport.close()


def inprocess_group(p: int, timeout: float = DEFAULT_TIMEOUT) -> list[Communicator]:
    """Communicators for ranks ``0..p`` wired through thread-safe queues."""
    # boxes[(a, b)] carries frames from rank a to rank b
    boxes = {}
    for r in range(1, p + 1):
        boxes[(0, r)] = queue.Queue()
        boxes[(r, 0)] = queue.Queue()
    comms = [
        Communicator(
            0, p,
            _QueueTransport({r: boxes[(r, 0)] for r in range(1, p + 1)},
                            {r: boxes[(0, r)] for r in range(1, p + 1)}),
            timeout,
        )
    ]
    for r in range(1, p + 1):
        comms.append(Communicator(r, p, _QueueTransport({0: boxes[(0, r)]}, {0: boxes[(r, 0)]}), timeout))
    return comms


class SocketListener:
    """Coordinator side of the TCP backend.  Bind first, then :meth:`accept`."""

    def __init__(self, p: int, port: int = 0, host: str = "127.0.0.1", timeout: float = DEFAULT_TIMEOUT):
        self.p = p
        self.timeout = timeout
        self._server = socket.create_server((host, port))
        self._server.listen(p)
        self.host = host
        self.port = self._server.getsockname()[1]

    def accept(self) -> tuple[Communicator, dict[int, np.ndarray]]:
        """Wait for all ``p`` workers; returns the communicator and each rank's HELLO values."""
        socks: dict[int, socket.socket] = {}
        hello: dict[int, np.ndarray] = {}
        deadline = time.monotonic() + self.timeout
        try:
            while len(socks) < self.p:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    missing = sorted(set(range(1, self.p + 1)) - set(socks))
                    raise CommTimeout(f"workers {missing} did not connect within {self.timeout:g}s")
                self._server.settimeout(remaining)
                try:
                    conn, _ = self._server.accept()
                except socket.timeout:
                    continue
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                conn.settimeout(self.timeout)
                tag, payload = decode_frame(_read_frame(conn))
                if tag is not Tag.HELLO:
                    conn.close()
                    raise ProtocolError(f"expected HELLO, got {tag.name}")
                vals = _from_payload(payload)
                rank = int(vals[0])
                if not 1 <= rank <= self.p or rank in socks:
                    conn.close()
                    raise ProtocolError(f"invalid or duplicate worker rank {rank}")
                socks[rank] = conn
                hello[rank] = vals
        except BaseException:
            for s in socks.values():
                s.close()
            raise
        finally:
            self._server.close()
        comm = Communicator(0, self.p, _SocketTransport(socks, self.timeout), self.timeout)
        for r, vals in hello.items():
            comm.received[(r, Tag.HELLO)] += vals.nbytes
        return comm, hello


def connect_worker(host: str, port: int, rank: int, hello_values,
                   timeout: float = DEFAULT_TIMEOUT) -> Communicator:
    """Worker side of the TCP backend; retries until the coordinator is listening."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=max(0.1, deadline - time.monotonic()))
            break
        except OSError:
            if time.monotonic() >= deadline:
                raise CommTimeout(f"could not reach coordinator at {host}:{port} within {timeout:g}s") from None
            time.sleep(0.05)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    comm = Communicator(rank, None, _SocketTransport({0: sock}, timeout), timeout)
    comm.send_values(0, Tag.HELLO, hello_values)
    return comm

