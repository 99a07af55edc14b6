"""Channel and queue tests: handshake, FIFO/no-loss under concurrency,
blocking behavior, region layout."""

import multiprocessing
import socket
import struct
import threading
import time

import pytest

from netrig import shmq
from netrig.proto import ChannelParams, Packet, Sync, WireMessage, decode, encode
from netrig.shmq import (
    HEADER_SIZE,
    AddressInUse,
    ChannelListener,
    ConnectFailed,
    HandshakeVersionMismatch,
    WouldBlock,
    connect,
    listen,
    memory_channel_pair,
    region_size,
)


def _params(**kw):
    kw.setdefault("slot_size_bytes", 256)
    kw.setdefault("queue_len_slots", 8)
    return ChannelParams(**kw)


def _listener_proc(path, params, results):
    ep = listen(path, params)
    results.put(("params", ep.params))
    ep.send_block(encode(WireMessage(500, Sync()), params.slot_size_bytes))
    for want_seq in range(3):
        while True:
            block = ep.recv_block()
            if block is not None:
                break
            time.sleep(0.0005)
        msg = decode(block)
        results.put(("pkt", msg.timestamp))
    ep.close()


def test_listen_connect_handshake_and_fifo(tmp_path):
    path = str(tmp_path / "chan")
    params = _params(link_latency_ns=700, sync_interval_ns=300)
    results = multiprocessing.Queue()
    proc = multiprocessing.Process(target=_listener_proc, args=(path, params, results))
    proc.start()
    try:
        ep = shmq.connect_retry(path)
        # Both endpoints report identical ChannelParams.
        assert ep.params == params
        kind, got = results.get(timeout=10)
        assert kind == "params" and got == params
        # Listener's first message crosses.
        while True:
            block = ep.recv_block()
            if block is not None:
                break
            time.sleep(0.0005)
        assert decode(block) == WireMessage(500, Sync())
        # Messages arrive in enqueue order.
        for ts in (1, 2, 3):
            ep.send_block(encode(WireMessage(ts, Packet(data=bytes(20))), 256))
        for want in (1, 2, 3):
            kind, ts = results.get(timeout=10)
            assert (kind, ts) == ("pkt", want)
        ep.close()
    finally:
        proc.join(timeout=10)
        assert proc.exitcode == 0


def test_second_listen_same_path_address_in_use(tmp_path):
    path = str(tmp_path / "chan")
    lst = ChannelListener(path, _params())
    try:
        with pytest.raises(AddressInUse):
            ChannelListener(path, _params())
    finally:
        lst.close()


def test_connect_without_listener_fails(tmp_path):
    with pytest.raises(ConnectFailed):
        connect(str(tmp_path / "nothing"))


def test_version_mismatch_detected_by_connector(tmp_path):
    # A hand-rolled listener speaking a future protocol version.
    path = str(tmp_path / "chan")
    params = _params()

    def bad_listener():
        srv = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        srv.bind(path)
        srv.listen(1)
        conn, _ = srv.accept()
        conn.recv(64)
        shm_path = path + ".shm"
        with open(shm_path, "wb") as f:
            f.truncate(region_size(params))
        rec = struct.pack(
            "<8sIIIIQQQQH", b"NRCHAN1\x00", 99, 1,
            params.slot_size_bytes, params.queue_len_slots,
            params.link_latency_ns, params.sync_interval_ns,
            HEADER_SIZE, HEADER_SIZE + params.queue_len_slots * params.slot_size_bytes,
            0,
        )
        conn.sendall(rec)
        time.sleep(0.2)
        conn.close()
        srv.close()

    t = threading.Thread(target=bad_listener)
    t.start()
    try:
        with pytest.raises(HandshakeVersionMismatch):
            shmq.connect_retry(path)
    finally:
        t.join()


def test_version_mismatch_detected_by_listener(tmp_path):
    path = str(tmp_path / "chan")
    lst = ChannelListener(path, _params())
    got = {}

    def accepting():
        try:
            lst.accept()
        except HandshakeVersionMismatch:
            got["raised"] = True

    t = threading.Thread(target=accepting)
    t.start()
    cli = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    cli.connect(path)
    cli.sendall(struct.pack("<8sI", b"NRHELLO\x00", 42))
    t.join(timeout=10)
    cli.close()
    assert got.get("raised")


def test_region_contains_only_header_and_slots(tmp_path):
    # Head/tail locality: nothing but a fixed header plus slots is shared.
    import os

    path = str(tmp_path / "chan")
    params = _params(slot_size_bytes=192, queue_len_slots=5)
    t = threading.Thread(target=lambda: listen(path, params).close)
    t.start()
    ep = shmq.connect_retry(path)
    t.join()
    assert os.path.getsize(path + ".shm") == HEADER_SIZE + 2 * 5 * 192
    assert region_size(params) == HEADER_SIZE + 2 * 5 * 192
    assert HEADER_SIZE == 64
    ep.close()


def test_single_threaded_fifo_roundtrip():
    a, b = memory_channel_pair(_params())
    for ts in (10, 20, 30):
        a.send_block(encode(WireMessage(ts, Sync()), 256))
    got = [decode(b.recv_block()).timestamp for _ in range(3)]
    assert got == [10, 20, 30]
    assert b.recv_block() is None


def test_full_queue_blocks_until_release():
    params = _params(queue_len_slots=4)
    a, b = memory_channel_pair(params)
    for ts in range(4):
        assert a.try_send_block(encode(WireMessage(ts, Sync()), 256))
    # Queue of length 4 holds 4 messages; the 5th alloc would block.
    assert a.tx.try_alloc_slot() is None
    with pytest.raises(WouldBlock):
        a.tx.alloc_slot(deadline=time.monotonic() + 0.05)
    assert b.recv_block() is not None  # consumer frees one slot
    slot = a.tx.alloc_slot(deadline=time.monotonic() + 1.0)
    assert slot is not None


def test_queue_len_2_producer_and_slow_consumer_complete():
    params = _params(queue_len_slots=2)
    a, b = memory_channel_pair(params)
    n = 100
    seen = []

    def consume():
        while len(seen) < n:
            block = b.recv_block()
            if block is None:
                time.sleep(0.001)
                continue
            seen.append(decode(block).timestamp)
            time.sleep(0.0002)  # deliberately slow

    t = threading.Thread(target=consume)
    t.start()
    for i in range(n):
        a.send_block(encode(WireMessage(i + 1, Sync()), 256))
    t.join(timeout=30)
    assert seen == [i + 1 for i in range(n)]


@pytest.mark.parametrize("n", [100_000])
def test_concurrent_fifo_no_loss_no_duplication(n):
    # Sequence numbers embedded in payloads are the oracle: the consumer
    # must observe exactly 1..n in order.
    params = ChannelParams(slot_size_bytes=128, queue_len_slots=16)
    a, b = memory_channel_pair(params)
    errors = []
    done = threading.Event()

    def produce():
        for i in range(n):
            block = encode(WireMessage(i + 1, Sync()), 128)
            while not a.try_send_block(block):
                time.sleep(0)  # yield the GIL while the ring is full
        done.set()

    received = []

    def consume():
        expect = 1
        while expect <= n:
            block = b.recv_block()
            if block is None:
                time.sleep(0)
                continue
            ts = decode(block).timestamp
            if ts != expect:
                errors.append((expect, ts))
                break
            expect += 1
        received.append(expect - 1)

    tp = threading.Thread(target=produce)
    tc = threading.Thread(target=consume)
    tc.start()
    tp.start()
    tp.join(timeout=120)
    tc.join(timeout=120)
    assert not errors, f"order violation: expected {errors[0][0]}, got {errors[0][1]}"
    assert received == [n]


def _producer_proc(path, n):
    ep = connect(path)
    for i in range(n):
        ep.send_block(encode(WireMessage(i + 1, Sync()), 128))
    ep.close()


def test_cross_process_fifo_no_loss():
    import tempfile

    n = 20_000
    with tempfile.TemporaryDirectory() as d:
        path = d + "/chan"
        params = ChannelParams(slot_size_bytes=128, queue_len_slots=16)
        lst = ChannelListener(path, params)
        proc = multiprocessing.Process(target=_producer_proc, args=(path, n))
        proc.start()
        ep = lst.accept()
        expect = 1
        deadline = time.monotonic() + 120
        while expect <= n and time.monotonic() < deadline:
            block = ep.recv_block()
            if block is None:
                continue
            assert decode(block).timestamp == expect
            expect += 1
        proc.join(timeout=10)
        ep.close()
        assert expect == n + 1
        assert proc.exitcode == 0


def test_ownership_alternation():
    # Owner-bit transitions for any slot alternate producer->consumer->producer.
    params = _params(queue_len_slots=2, slot_size_bytes=128)
    a, b = memory_channel_pair(params)
    meta_off = shmq.HEADER_SIZE + 128 - 1  # first slot of queue A
    transitions = []

    def owner():
        return (a.tx.buf[meta_off] & 0x80) != 0

    transitions.append(owner())
    for _ in range(3):
        a.send_block(encode(WireMessage(1, Sync()), 128))
        transitions.append(owner())
        assert b.recv_block() is not None
        transitions.append(owner())
        # skip the second slot to come back around to slot 0
        a.send_block(encode(WireMessage(2, Sync()), 128))
        assert b.recv_block() is not None
    assert transitions == [False, True, False, True, False, True, False]
