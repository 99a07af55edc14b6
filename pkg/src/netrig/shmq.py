"""Single-producer single-consumer shared-memory channels.

A channel is a pair of unidirectional ring queues in opposite directions
inside one shared-memory file, established through a named Unix-socket
handshake. Queues hold fixed-size slots; the final byte of each slot is
the metadata byte (bit7 = owner, bits 0..6 = message type). Head and
tail indices are local to consumer and producer respectively, so the
shared region contains nothing but a fixed header plus the slots.

Ordering contract: the producer writes the whole slot body first and
publishes with a single store of the metadata byte; the consumer reads
the metadata byte before touching the body. CPython executes these as
separate machine stores/loads in program order and x86-TSO keeps them
ordered, which is the same compiler-barrier-only argument the slot
protocol rests on; non-TSO hosts are out of scope, like cross-endian
peers (both rejected via the region magic).

An in-process variant with identical semantics over heap memory backs
the threaded unit tests.
"""

from __future__ import annotations

import mmap
import os
import socket
import struct
import time

from .proto import OWNER_BIT, ChannelParams

SHM_MAGIC = b"SBRK1\x00\x00\x00"
HEADER_SIZE = 64
_HDR_FMT = "<8sII"  # magic, slot_size, queue_len

PROTO_VERSION = 1
_HELLO_MAGIC = b"NRHELLO\x00"
_HELLO_FMT = "<8sI"
_RECORD_MAGIC = b"NRCHAN1\x00"
_RECORD_FMT = "<8sIIIIQQQQH"  # magic, version, flags, slot, qlen, link, sync, off_a, off_b, path_len
_FLAG_SYNCHRONIZED = 1

_SPIN_FAST = 200
_SPIN_YIELD = 400
_BACKOFF_SLEEP_S = 0.0002


class ChannelError(Exception):
    pass


class AddressInUse(ChannelError):
    pass


class ShmCreateFailed(ChannelError):
    pass


class HandshakeVersionMismatch(ChannelError):
    pass


class ConnectFailed(ChannelError):
    pass


class MapFailed(ChannelError):
    pass


class WouldBlock(ChannelError):
    """Blocking queue operation exceeded its deadline."""


class PeerDisconnected(ChannelError):
    """Peer's handshake socket EOFed with nothing left to poll."""


PRODUCER = "producer"
CONSUMER = "consumer"


def region_size(params: ChannelParams) -> int:
    return HEADER_SIZE + 2 * params.queue_len_slots * params.slot_size_bytes


def queue_offsets(params: ChannelParams) -> tuple[int, int]:
    qbytes = params.queue_len_slots * params.slot_size_bytes
    return HEADER_SIZE, HEADER_SIZE + qbytes


class QueueRegion:
    """One ring of slots, viewed from exactly one role."""

    def __init__(self, buf, offset: int, slot_size: int, queue_len: int, role: str):
        self.buf = buf
        self.offset = offset
        self.slot_size = slot_size
        self.queue_len = queue_len
        self.role = role
        self.local_index = 0  # tail for producer, head for consumer

    def _slot(self, idx: int) -> memoryview:
        base = self.offset + idx * self.slot_size
        return memoryview(self.buf)[base : base + self.slot_size]

    def _meta(self, idx: int) -> int:
        return self.buf[self.offset + (idx + 1) * self.slot_size - 1]

    # producer side

    def try_alloc_slot(self) -> memoryview | None:
        assert self.role == PRODUCER
        if self._meta(self.local_index) & OWNER_BIT:
            return None
        slot = self._slot(self.local_index)
        self.local_index = (self.local_index + 1) % self.queue_len
        return slot

    def alloc_slot(self, deadline: float | None = None) -> memoryview:
        """Spin (with bounded backoff) until the tail slot is free."""
        spins = 0
        while True:
            slot = self.try_alloc_slot()
            if slot is not None:
                return slot
            spins += 1
            if spins > _SPIN_FAST:
                time.sleep(0 if spins < _SPIN_YIELD else _BACKOFF_SLEEP_S)
            if deadline is not None and time.monotonic() > deadline:
                raise WouldBlock("alloc_slot deadline exceeded")

    def enqueue_slot(self, slot: memoryview) -> None:
        """Publish: single store of the metadata byte with owner=consumer."""
        assert self.role == PRODUCER
        slot[-1] = slot[-1] | OWNER_BIT

    # consumer side

    def poll_slot(self) -> memoryview | None:
        assert self.role == CONSUMER
        if not self._meta(self.local_index) & OWNER_BIT:
            return None
        slot = self._slot(self.local_index)
        self.local_index = (self.local_index + 1) % self.queue_len
        return slot

    def release_slot(self, slot: memoryview) -> None:
        """Return the slot to the producer; body must not be read after."""
        assert self.role == CONSUMER
        slot[-1] = slot[-1] & ~OWNER_BIT


class ChannelEndpoint:
    """One end of a bidirectional channel: a consumer rx ring, a producer
    tx ring, and the handshake socket kept open as a liveness canary."""

    def __init__(self, rx: QueueRegion, tx: QueueRegion, params: ChannelParams,
                 peer_name: str, sock: socket.socket | None = None,
                 mm: mmap.mmap | None = None):
        self.rx = rx
        self.tx = tx
        self.params = params
        self.peer_name = peer_name
        self.sock = sock
        self.mm = mm
        self._peer_eof = False
        if sock is not None:
            sock.setblocking(False)

    # transport convenience used by the sync engine and the proxy

    def send_block(self, block: bytes, deadline: float | None = None) -> None:
        slot = self.tx.alloc_slot(deadline=deadline)
        slot[: len(block) - 1] = block[:-1]
        slot[-1] = block[-1]
        self.tx.enqueue_slot(slot)

    def try_send_block(self, block: bytes) -> bool:
        slot = self.tx.try_alloc_slot()
        if slot is None:
            return False
        slot[: len(block) - 1] = block[:-1]
        slot[-1] = block[-1]
        self.tx.enqueue_slot(slot)
        return True

    def recv_block(self) -> bytes | None:
        slot = self.rx.poll_slot()
        if slot is None:
            return None
        block = bytes(slot)
        self.rx.release_slot(slot)
        return block

    def peer_alive(self) -> bool:
        if self.sock is None:
            return True
        if self._peer_eof:
            return False
        try:
            data = self.sock.recv(64)
            if data == b"":
                self._peer_eof = True
                return False
        except BlockingIOError:
            pass
        except OSError:
            self._peer_eof = True
            return False
        return True

    def shutdown_write(self) -> None:
        """Half-close the canary: the peer observes EOF while we can still
        watch for theirs."""
        if self.sock is not None:
            try:
                self.sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass

    def close_socket(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            except OSError:
                pass
            self.sock = None

    def close(self) -> None:
        self.close_socket()
        if self.mm is not None:
            try:
                self.mm.close()
            except (BufferError, OSError):
                pass  # outstanding memoryviews; region unmapped at exit
            self.mm = None


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectFailed("peer closed during handshake")
        buf += chunk
    return buf


def _pack_record(params: ChannelParams, shm_path: str) -> bytes:
    off_a, off_b = queue_offsets(params)
    path = shm_path.encode()
    flags = _FLAG_SYNCHRONIZED if params.synchronized else 0
    return struct.pack(
        _RECORD_FMT,
        _RECORD_MAGIC,
        PROTO_VERSION,
        flags,
        params.slot_size_bytes,
        params.queue_len_slots,
        params.link_latency_ns,
        params.sync_interval_ns,
        off_a,
        off_b,
        len(path),
    ) + path


def _unpack_record(sock: socket.socket) -> tuple[ChannelParams, str, int, int, int]:
    fixed = _recv_exact(sock, struct.calcsize(_RECORD_FMT))
    magic, version, flags, slot, qlen, link, sync, off_a, off_b, plen = struct.unpack(
        _RECORD_FMT, fixed
    )
    if magic != _RECORD_MAGIC:
        raise ConnectFailed("bad handshake record magic")
    path = _recv_exact(sock, plen).decode()
    params = ChannelParams(
        link_latency_ns=link,
        sync_interval_ns=sync,
        slot_size_bytes=slot,
        queue_len_slots=qlen,
        synchronized=bool(flags & _FLAG_SYNCHRONIZED),
    )
    return params, path, off_a, off_b, version


class ChannelListener:
    """Bound-but-not-yet-accepted listening end of a channel.

    Splitting bind from accept lets a component bind all its listening
    sockets before any blocking accept, which is what makes multi-channel
    startup deadlock-free regardless of wiring order.
    """

    def __init__(self, socket_path: str, params: ChannelParams,
                 shm_path: str | None = None):
        self.socket_path = socket_path
        self.params = params
        self.shm_path = shm_path if shm_path is not None else socket_path + ".shm"
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            self._sock.bind(socket_path)
        except OSError as e:
            self._sock.close()
            raise AddressInUse(f"cannot bind {socket_path}: {e}") from e
        self._sock.listen(1)

    def accept(self) -> ChannelEndpoint:
        conn, _ = self._sock.accept()
        self._sock.close()
        try:
            hello = _recv_exact(conn, struct.calcsize(_HELLO_FMT))
            magic, version = struct.unpack(_HELLO_FMT, hello)
            if magic != _HELLO_MAGIC:
                raise ConnectFailed("bad hello magic")

            size = region_size(self.params)
            try:
                with open(self.shm_path, "wb") as f:
                    f.truncate(size)  # zero-filled: every slot producer-owned
                fd = os.open(self.shm_path, os.O_RDWR)
            except OSError as e:
                raise ShmCreateFailed(f"cannot create {self.shm_path}: {e}") from e
            try:
                mm = mmap.mmap(fd, size)
            finally:
                os.close(fd)
            struct.pack_into(
                _HDR_FMT, mm, 0, SHM_MAGIC,
                self.params.slot_size_bytes, self.params.queue_len_slots,
            )

            conn.sendall(_pack_record(self.params, self.shm_path))
            if version != PROTO_VERSION:
                raise HandshakeVersionMismatch(
                    f"peer speaks version {version}, expected {PROTO_VERSION}"
                )
        except Exception:
            conn.close()
            raise

        off_a, off_b = queue_offsets(self.params)
        p = self.params
        return ChannelEndpoint(
            rx=QueueRegion(mm, off_b, p.slot_size_bytes, p.queue_len_slots, CONSUMER),
            tx=QueueRegion(mm, off_a, p.slot_size_bytes, p.queue_len_slots, PRODUCER),
            params=p,
            peer_name=self.socket_path,
            sock=conn,
            mm=mm,
        )

    def close(self) -> None:
        self._sock.close()


def listen(socket_path: str, params: ChannelParams,
           shm_path: str | None = None) -> ChannelEndpoint:
    """Bind, block until a peer connects, allocate the shared region and
    complete the handshake. The returned endpoint transmits on the first
    queue."""
    return ChannelListener(socket_path, params, shm_path=shm_path).accept()


class PendingConnect:
    """First half of ``connect``: the socket connection and hello complete
    against the listener's backlog, so many of these can be opened before
    any listener has accepted; mutually listening/connecting components
    can therefore wire up in phases without deadlocking."""

    def __init__(self, socket_path: str):
        self.socket_path = socket_path
        self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            self.sock.connect(socket_path)
            self.sock.sendall(struct.pack(_HELLO_FMT, _HELLO_MAGIC, PROTO_VERSION))
        except OSError as e:
            self.sock.close()
            raise ConnectFailed(f"cannot connect to {socket_path}: {e}") from e

    def finish(self) -> ChannelEndpoint:
        """Second half: read the record (sent by the listener's accept),
        map the region, return the endpoint."""
        sock = self.sock
        try:
            params, shm_path, off_a, off_b, version = _unpack_record(sock)
            if version != PROTO_VERSION:
                raise HandshakeVersionMismatch(
                    f"listener speaks version {version}, expected {PROTO_VERSION}"
                )
            try:
                fd = os.open(shm_path, os.O_RDWR)
            except OSError as e:
                raise MapFailed(f"cannot open {shm_path}: {e}") from e
            try:
                mm = mmap.mmap(fd, region_size(params))
            except (OSError, ValueError) as e:
                raise MapFailed(f"cannot map {shm_path}: {e}") from e
            finally:
                os.close(fd)
            magic, slot, qlen = struct.unpack_from(_HDR_FMT, mm, 0)
            if magic != SHM_MAGIC:
                raise MapFailed("bad shared-memory magic (endianness or layout mismatch)")
            if slot != params.slot_size_bytes or qlen != params.queue_len_slots:
                raise MapFailed("shared-memory geometry disagrees with handshake record")
        except Exception:
            sock.close()
            raise
        return ChannelEndpoint(
            rx=QueueRegion(mm, off_a, params.slot_size_bytes, params.queue_len_slots, CONSUMER),
            tx=QueueRegion(mm, off_b, params.slot_size_bytes, params.queue_len_slots, PRODUCER),
            params=params,
            peer_name=self.socket_path,
            sock=sock,
            mm=mm,
        )


def connect(socket_path: str) -> ChannelEndpoint:
    """Connect to a listening channel; the handshake record is
    authoritative for all parameters. Transmits on the second queue."""
    return PendingConnect(socket_path).finish()


def pending_connect_retry(socket_path: str, timeout_s: float = 10.0) -> PendingConnect:
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            return PendingConnect(socket_path)
        except ConnectFailed:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.01)


def connect_retry(socket_path: str, timeout_s: float = 10.0) -> ChannelEndpoint:
    """Retry ``connect`` until the listener is bound; used during wiring."""
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            return connect(socket_path)
        except ConnectFailed:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.01)


def memory_channel_pair(params: ChannelParams) -> tuple[ChannelEndpoint, ChannelEndpoint]:
    """In-process channel over heap memory with identical semantics;
    exercises the slot algorithm under thread interleaving."""
    buf = bytearray(region_size(params))
    struct.pack_into(_HDR_FMT, buf, 0, SHM_MAGIC,
                     params.slot_size_bytes, params.queue_len_slots)
    off_a, off_b = queue_offsets(params)
    s, q = params.slot_size_bytes, params.queue_len_slots
    a = ChannelEndpoint(
        rx=QueueRegion(buf, off_b, s, q, CONSUMER),
        tx=QueueRegion(buf, off_a, s, q, PRODUCER),
        params=params,
        peer_name="mem:b",
    )
    b = ChannelEndpoint(
        rx=QueueRegion(buf, off_a, s, q, CONSUMER),
        tx=QueueRegion(buf, off_b, s, q, PRODUCER),
        params=params,
        peer_name="mem:a",
    )
    return a, b
