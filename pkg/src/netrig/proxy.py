"""TCP proxy pair: splices one shared-memory channel across a TCP
connection, transparently to the component simulators.

Each proxy terminates the local queue pair and forwards slot contents
to its peer proxy, which operates symmetrically. Timestamps are
forwarded unmodified; correctness rests only on timestamps, so the
extra transport latency is invisible in virtual time.

Wire protocol (all little-endian), per direction:
    preamble: 4-byte magic "NRPX" + u32 version
    params:   u64 link latency, u64 sync interval, u32 slot, u32 qlen, u32 flags
    frames:   u32 count, then count x [u64 ts, u32 plen, payload, u8 type]
A frame with count == 0 is the FIN marker for graceful end-of-run;
abrupt TCP EOF without FIN means the peer died and the proxy exits
nonzero so the orchestrator can abort the run.

Adaptive batching: each frame carries whatever is ready in the local rx
queue at that moment, minimum one message, capped at 64 KiB.
"""

from __future__ import annotations

import argparse
import logging
import socket
import struct
import sys
import threading
import time

from .proto import HDR_FMT, HDR_SIZE, OWNER_BIT, ChannelParams
from .shmq import ChannelEndpoint, ChannelListener, connect_retry

log = logging.getLogger(__name__)

TCP_MAGIC = b"NRPX"
TCP_VERSION = 1
_PREAMBLE_FMT = "<4sI"
_PARAMS_FMT = "<QQIII"
_COUNT_FMT = "<I"
_BLOCK_HDR_FMT = "<QI"
MAX_FRAME_BYTES = 64 * 1024
_FLAG_SYNCHRONIZED = 1

_POLL_SLEEP_S = 0.0002


class ProxyError(Exception):
    pass


class ParamMismatch(ProxyError):
    """The two proxy halves were configured with different channel params."""


class TcpClosed(ProxyError):
    """Peer proxy vanished without a FIN."""


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TcpClosed("TCP peer closed")
        buf += chunk
    return buf


def _pack_params(p: ChannelParams) -> bytes:
    flags = _FLAG_SYNCHRONIZED if p.synchronized else 0
    return struct.pack(_PARAMS_FMT, p.link_latency_ns, p.sync_interval_ns,
                       p.slot_size_bytes, p.queue_len_slots, flags)


def _exchange_handshake(sock: socket.socket, params: ChannelParams) -> None:
    sock.sendall(struct.pack(_PREAMBLE_FMT, TCP_MAGIC, TCP_VERSION))
    sock.sendall(_pack_params(params))
    magic, version = struct.unpack(_PREAMBLE_FMT,
                                   _recv_exact(sock, struct.calcsize(_PREAMBLE_FMT)))
    if magic != TCP_MAGIC or version != TCP_VERSION:
        raise ProxyError(f"bad proxy preamble {magic!r} v{version}")
    theirs = _recv_exact(sock, struct.calcsize(_PARAMS_FMT))
    if theirs != _pack_params(params):
        raise ParamMismatch(
            f"peer proxy params {struct.unpack(_PARAMS_FMT, theirs)} != "
            f"ours {struct.unpack(_PARAMS_FMT, _pack_params(params))}"
        )


def _block_to_wire(block: bytes) -> bytes:
    ts, plen = struct.unpack_from(HDR_FMT, block, 0)
    payload = block[HDR_SIZE : HDR_SIZE + plen]
    msg_type = block[-1] & ~OWNER_BIT
    return struct.pack(_BLOCK_HDR_FMT, ts, plen) + payload + bytes([msg_type])


class Proxy:
    def __init__(self, endpoint: ChannelEndpoint, sock: socket.socket):
        self.endpoint = endpoint
        self.sock = sock
        self.slot_size = endpoint.params.slot_size_bytes
        self.fin_sent = False
        self.fin_received = False
        self.failure: Exception | None = None
        self._stop = threading.Event()

    # --- local rx queue -> TCP, with adaptive batching ---------------------

    def _send_frame(self, batch: list[bytes]) -> None:
        self.sock.sendall(struct.pack(_COUNT_FMT, len(batch)) + b"".join(batch))

    def _pump_out(self) -> None:
        try:
            while True:
                if self._stop.is_set():
                    return  # TCP side already failed; no FIN
                block = self.endpoint.recv_block()
                if block is None:
                    if not self.endpoint.peer_alive():
                        block = self.endpoint.recv_block()  # drain the EOF race
                        if block is None:
                            break  # local component exited, queue empty
                    else:
                        time.sleep(_POLL_SLEEP_S)
                        continue
                # One frame per drain: everything ready right now, >= 1.
                batch = [_block_to_wire(block)]
                size = len(batch[0])
                while True:
                    block = self.endpoint.recv_block()
                    if block is None:
                        break
                    wire = _block_to_wire(block)
                    if size + len(wire) > MAX_FRAME_BYTES:
                        self._send_frame(batch)  # fragment above 64 KiB
                        batch, size = [], 0
                    batch.append(wire)
                    size += len(wire)
                self._send_frame(batch)
            self.sock.sendall(struct.pack(_COUNT_FMT, 0))  # FIN
            self.fin_sent = True
            try:
                self.sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
        except Exception as e:  # noqa: BLE001 - report through exit code
            self.failure = self.failure or e

    # --- TCP -> local tx queue ----------------------------------------------

    def _pump_in(self) -> None:
        try:
            while True:
                (count,) = struct.unpack(_COUNT_FMT,
                                         _recv_exact(self.sock, struct.calcsize(_COUNT_FMT)))
                if count == 0:
                    self.fin_received = True
                    return
                for _ in range(count):
                    hdr = _recv_exact(self.sock, struct.calcsize(_BLOCK_HDR_FMT))
                    ts, plen = struct.unpack(_BLOCK_HDR_FMT, hdr)
                    payload = _recv_exact(self.sock, plen) if plen else b""
                    (msg_type,) = _recv_exact(self.sock, 1)
                    block = bytearray(self.slot_size)
                    struct.pack_into(HDR_FMT, block, 0, ts, plen)
                    block[HDR_SIZE : HDR_SIZE + plen] = payload
                    block[-1] = msg_type & ~OWNER_BIT
                    self.endpoint.send_block(bytes(block))
        except Exception as e:  # noqa: BLE001
            self.failure = self.failure or e
            self._stop.set()

    def run(self) -> int:
        """Forward until graceful FIN in both directions; nonzero on any
        abrupt failure."""
        t_out = threading.Thread(target=self._pump_out, name="shm2tcp")
        t_in = threading.Thread(target=self._pump_in, name="tcp2shm")
        t_out.start()
        t_in.start()
        t_in.join()
        t_out.join()
        self.endpoint.shutdown_write()
        if self.failure is not None:
            log.error("proxy failed: %s", self.failure)
            return 1
        if not (self.fin_sent and self.fin_received):
            log.error("proxy closed without bidirectional FIN")
            return 1
        return 0


def _tcp_listen(addr: tuple[str, int]) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(addr)
    srv.listen(1)
    conn, _ = srv.accept()
    srv.close()
    return conn


def _tcp_connect(addr: tuple[str, int], timeout_s: float = 30.0) -> socket.socket:
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            return socket.create_connection(addr)
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)


def run_proxy(tcp_role: str, tcp_addr: tuple[str, int], chan_path: str,
              chan_role: str, params: ChannelParams) -> int:
    """Bring up one proxy half: TCP link first, then the local channel."""
    sock = _tcp_listen(tcp_addr) if tcp_role == "listen" else _tcp_connect(tcp_addr)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    try:
        _exchange_handshake(sock, params)
        if chan_role == "listen":
            endpoint = ChannelListener(chan_path, params).accept()
        else:
            endpoint = connect_retry(chan_path, timeout_s=30.0)
            if endpoint.params != params:
                raise ParamMismatch(
                    f"local channel params {endpoint.params} != configured {params}"
                )
    except ProxyError as e:
        log.error("proxy startup failed: %s", e)
        sock.close()
        return 1
    return Proxy(endpoint, sock).run()


def _parse_addr(text: str) -> tuple[str, int]:
    host, port = text.rsplit(":", 1)
    return host, int(port)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="netrig-proxy",
                                 description="splice one channel over TCP")
    group = ap.add_mutually_exclusive_group(required=True)
    group.add_argument("--listen", metavar="HOST:PORT")
    group.add_argument("--connect", metavar="HOST:PORT")
    ap.add_argument("--chan", required=True, help="local channel socket path")
    ap.add_argument("--chan-role", choices=("listen", "connect"), required=True)
    ap.add_argument("--link-latency", type=int, default=500)
    ap.add_argument("--sync-interval", type=int, default=None)
    ap.add_argument("--slot-size", type=int, default=4096)
    ap.add_argument("--queue-len", type=int, default=64)
    ap.add_argument("--unsynchronized", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr)
    params = ChannelParams(
        link_latency_ns=args.link_latency,
        sync_interval_ns=args.sync_interval,
        slot_size_bytes=args.slot_size,
        queue_len_slots=args.queue_len,
        synchronized=not args.unsynchronized,
    )
    if args.listen:
        return run_proxy("listen", _parse_addr(args.listen), args.chan,
                         args.chan_role, params)
    return run_proxy("connect", _parse_addr(args.connect), args.chan,
                     args.chan_role, params)


if __name__ == "__main__":
    sys.exit(main())
