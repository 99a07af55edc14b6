"""Single-process reference execution of a whole topology.

One global event queue, direct in-memory message delivery delayed by
each channel's link latency, no queues, no SYNCs, no horizons. The same
component logic runs unmodified, so canonical traces from this executor
are the exact-match oracle for the decomposed multi-process run.

Per-component event ordering mirrors the distributed engine: at equal
times, deliveries (by peer attach index, then channel FIFO position)
precede local events (by insertion sequence). Components never share
state, so ordering across components at equal time is immaterial; the
component index keeps it deterministic anyway.
"""

from __future__ import annotations

import heapq

from .. import proto
from ..trace import Tracer

_KIND_DELIVERY = 0
_KIND_LOCAL = 1


class _MonoPort:
    """Send handle mirroring the distributed kernel's port surface."""

    def __init__(self, net: "SingleProcessNet", dst_idx: int, dst_port_name: str,
                 src_idx: int, chan_id: str, params: proto.ChannelParams):
        self._net = net
        self.dst_idx = dst_idx
        self.dst_port_name = dst_port_name
        self.src_idx = src_idx
        self.chan_id = chan_id
        self.params = params
        self.dst_peer_index = -1  # attach index on the receiving component
        self.fifo_seq = 0

    def send(self, body) -> None:
        self._net._send(self, body)


class _MonoCtx:
    def __init__(self, net: "SingleProcessNet", comp_idx: int):
        self._net = net
        self.comp_idx = comp_idx

    @property
    def now(self) -> int:
        return self._net.now

    def schedule(self, at: int, fn) -> None:
        self._net._schedule_local(self.comp_idx, at, fn)

    def schedule_in(self, delay: int, fn) -> None:
        self._net._schedule_local(self.comp_idx, self._net.now + delay, fn)

    def trace_local(self, tag: str, payload: bytes = b"") -> None:
        self._net.tracers[self.comp_idx].emit(self._net.now, "-", "local", tag, payload)


class SingleProcessNet:
    def __init__(self):
        self.now = 0
        self.comp_ids: list[str] = []
        self.components: list = []
        self.tracers: list[Tracer] = []
        self._peer_counts: list[int] = []
        self._heap: list = []
        self._tick = 0  # heap tiebreak so callbacks never compare
        self._local_seq: list[int] = []
        self._started = False

    def add_component(self, comp_id: str, trace_path: str | None = None) -> _MonoCtx:
        idx = len(self.comp_ids)
        self.comp_ids.append(comp_id)
        self.components.append(None)
        self.tracers.append(Tracer(comp_id, trace_path))
        self._peer_counts.append(0)
        self._local_seq.append(0)
        return _MonoCtx(self, idx)

    def register(self, ctx: _MonoCtx, component) -> None:
        self.components[ctx.comp_idx] = component

    def connect(self, a: tuple[str, str], b: tuple[str, str],
                params: proto.ChannelParams, chan_id: str) -> None:
        """Wire component port a to component port b; call in the same
        order the multi-process wiring attaches channels."""
        ia = self.comp_ids.index(a[0])
        ib = self.comp_ids.index(b[0])
        port_ab = _MonoPort(self, ib, b[1], ia, chan_id, params)
        port_ba = _MonoPort(self, ia, a[1], ib, chan_id, params)
        port_ab.dst_peer_index = self._peer_counts[ib]
        self._peer_counts[ib] += 1
        port_ba.dst_peer_index = self._peer_counts[ia]
        self._peer_counts[ia] += 1
        self.components[ia].bind_port(a[1], port_ab)
        self.components[ib].bind_port(b[1], port_ba)

    def _push(self, key: tuple, fn) -> None:
        heapq.heappush(self._heap, (*key, self._tick, fn))
        self._tick += 1

    def _send(self, port: _MonoPort, body) -> None:
        payload = proto.pack_payload(body)
        self.tracers[port.src_idx].emit(self.now, port.chan_id, "tx",
                                        body.TYPE.name, payload)
        t = self.now + port.params.link_latency_ns
        key = (t, port.dst_idx, _KIND_DELIVERY, port.dst_peer_index, port.fifo_seq)
        port.fifo_seq += 1
        self._push(key, lambda: self._deliver(port, body, payload))

    def _deliver(self, port: _MonoPort, body, payload: bytes) -> None:
        self.tracers[port.dst_idx].emit(self.now, port.chan_id, "rx",
                                        body.TYPE.name, payload)
        self.components[port.dst_idx].on_message(port.dst_port_name, body)

    def _schedule_local(self, comp_idx: int, at: int, fn) -> None:
        assert at >= self.now
        key = (at, comp_idx, _KIND_LOCAL, self._local_seq[comp_idx], 0)
        self._local_seq[comp_idx] += 1
        self._push(key, fn)

    def run(self, until: int) -> None:
        """Execute all events strictly before ``until``; resumable."""
        if not self._started:
            self._started = True
            for idx, comp in enumerate(self.components):
                self._schedule_local(idx, 0, comp.start)
        while self._heap and self._heap[0][0] < until:
            entry = heapq.heappop(self._heap)
            self.now = entry[0]
            entry[-1]()
        self.now = until

    def finish(self) -> dict[str, list[str]]:
        out = {}
        for comp_id, comp, tracer in zip(self.comp_ids, self.components, self.tracers):
            out[comp_id] = comp.finish()
            tracer.close()
        return out
