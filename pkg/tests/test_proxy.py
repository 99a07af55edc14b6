"""Proxy tests: adaptive batching, transparency oracle over real TCP,
parameter checks, failure propagation."""

import socket
import struct
import subprocess
import sys
import threading
import time

from netrig.proto import ChannelParams, Packet, Sync, WireMessage, decode, encode
from netrig.proxy import Proxy, run_proxy
from netrig.shmq import ChannelListener, connect_retry


def _params(**kw):
    kw.setdefault("slot_size_bytes", 128)
    kw.setdefault("queue_len_slots", 16)
    return ChannelParams(**kw)


class _FakeSock:
    """Collects sent frames; feeds nothing (tests drive pump_out only)."""

    def __init__(self):
        self.chunks = []

    def sendall(self, data):
        self.chunks.append(bytes(data))

    def shutdown(self, how):
        pass

    def frames(self):
        blob = b"".join(self.chunks)
        counts = []
        off = 0
        while off < len(blob):
            (count,) = struct.unpack_from("<I", blob, off)
            off += 4
            counts.append(count)
            for _ in range(count):
                ts, plen = struct.unpack_from("<QI", blob, off)
                off += 12 + plen + 1
        return counts


class _FakeEndpoint:
    """Scripted local queue: a sequence of blocks and None gaps, then EOF."""

    def __init__(self, script, params):
        self.script = list(script)
        self.params = params
        self.sent = []

    def recv_block(self):
        if not self.script:
            return None
        item = self.script.pop(0)
        return item

    def peer_alive(self):
        return bool(self.script)

    def send_block(self, block, deadline=None):
        self.sent.append(block)

    def shutdown_write(self):
        pass


def _block(ts):
    return encode(WireMessage(ts, Sync()), 128)


def test_burst_of_ready_messages_is_one_frame():
    params = _params()
    blocks = [_block(i + 1) for i in range(10)]
    ep = _FakeEndpoint(blocks, params)
    sock = _FakeSock()
    p = Proxy(ep, sock)
    p._pump_out()
    assert sock.frames() == [10, 0]  # one 10-message frame, then FIN


def test_trickle_is_one_message_per_frame():
    params = _params()
    script = []
    for i in range(3):
        script.append(_block(i + 1))
        script.extend([None] * 3)  # queue runs dry between messages
    ep = _FakeEndpoint(script, params)
    sock = _FakeSock()
    Proxy(ep, sock)._pump_out()
    assert sock.frames() == [1, 1, 1, 0]


def test_large_burst_fragments_above_frame_cap():
    params = ChannelParams(slot_size_bytes=4096, queue_len_slots=512)
    frame = Packet(data=bytes(4000))
    blocks = [encode(WireMessage(i + 1, frame), 4096) for i in range(32)]
    ep = _FakeEndpoint(blocks, params)
    sock = _FakeSock()
    Proxy(ep, sock)._pump_out()
    counts = sock.frames()
    assert sum(counts) == 32
    assert all(c * 4013 <= 64 * 1024 for c in counts if c)


def _free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def test_sequence_oracle_through_real_proxy_pair(tmp_path):
    n = 100_000
    params = _params()
    port = _free_port()
    path_a = str(tmp_path / "a")
    path_b = str(tmp_path / "b")
    rc = {}

    def run_a():
        rc["a"] = run_proxy("listen", ("127.0.0.1", port), path_a, "connect", params)

    def run_b():
        rc["b"] = run_proxy("connect", ("127.0.0.1", port), path_b, "listen", params)

    lst = ChannelListener(path_a, params)
    ta = threading.Thread(target=run_a)
    tb = threading.Thread(target=run_b)
    ta.start()
    tb.start()
    end_a = lst.accept()  # component A <- proxy A connects
    end_b = connect_retry(path_b, timeout_s=30)  # component B -> proxy B

    got = []
    errors = []

    def consume():
        while len(got) < n:
            block = end_b.recv_block()
            if block is None:
                time.sleep(0)
                continue
            msg = decode(block)
            if msg.timestamp != len(got) + 1:
                errors.append((len(got) + 1, msg.timestamp))
                return
            got.append(msg.timestamp)

    tc = threading.Thread(target=consume)
    tc.start()
    for i in range(n):
        end_a.send_block(_block(i + 1))
    tc.join(timeout=300)
    assert not errors, f"order violation {errors[0]}"
    assert len(got) == n
    # a couple of messages in the reverse direction as well
    for i in range(3):
        end_b.send_block(_block(100 + i))
    seen = 0
    deadline = time.monotonic() + 30
    while seen < 3 and time.monotonic() < deadline:
        block = end_a.recv_block()
        if block is not None:
            assert decode(block).timestamp == 100 + seen
            seen += 1
    assert seen == 3
    # graceful shutdown: components exit, proxies FIN both ways, exit 0
    end_a.shutdown_write()
    end_b.shutdown_write()
    ta.join(timeout=30)
    tb.join(timeout=30)
    assert rc == {"a": 0, "b": 0}
    end_a.close()
    end_b.close()


def test_param_mismatch_is_fatal_at_startup(tmp_path):
    port = _free_port()
    rc = {}

    def run_a():
        rc["a"] = run_proxy("listen", ("127.0.0.1", port), str(tmp_path / "a"),
                            "connect", _params(link_latency_ns=500))

    def run_b():
        rc["b"] = run_proxy("connect", ("127.0.0.1", port), str(tmp_path / "b"),
                            "listen", _params(link_latency_ns=900))

    ta = threading.Thread(target=run_a)
    tb = threading.Thread(target=run_b)
    ta.start()
    tb.start()
    ta.join(timeout=30)
    tb.join(timeout=30)
    assert rc == {"a": 1, "b": 1}


def test_killed_proxy_propagates_failure(tmp_path):
    params = _params()
    port = _free_port()
    path_a = str(tmp_path / "a")
    path_b = str(tmp_path / "b")

    def spawn(args):
        return subprocess.Popen(
            [sys.executable, "-m", "netrig.proxy", *args],
            stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
        )

    common = ["--link-latency", "500", "--slot-size", "128", "--queue-len", "16"]
    pa = spawn(["--listen", f"127.0.0.1:{port}", "--chan", path_a,
                "--chan-role", "connect", *common])
    pb = spawn(["--connect", f"127.0.0.1:{port}", "--chan", path_b,
                "--chan-role", "listen", *common])
    lst = ChannelListener(path_a, params)
    end_a = lst.accept()
    end_b = connect_retry(path_b, timeout_s=30)
    end_a.send_block(_block(1))
    deadline = time.monotonic() + 30
    while end_b.recv_block() is None:
        assert time.monotonic() < deadline
        time.sleep(0.001)
    pa.kill()  # one proxy dies mid-run
    assert pb.wait(timeout=30) != 0  # peer proxy exits nonzero
    pa.wait(timeout=30)
    end_a.close()
    end_b.close()
