"""Discrete-event kernel with conservative pairwise clock synchronization.

Every component simulator embeds one kernel. Outbound messages are
stamped ``now + link_latency`` for their channel; a per-channel timer
emits a payload-free SYNC whenever nothing has been sent for the
channel's sync interval, so peers' receive horizons keep advancing. A
message stamped ``t`` is an implicit promise that nothing earlier will
ever arrive on that channel, so the newest received timestamp per peer
is a horizon the local clock may not pass.

Determinism ordering. Simultaneous events execute in a fixed total
order per component: inbound deliveries first, ordered by (peer attach
index, channel FIFO position), then local events by insertion sequence.
Because equal timestamps are legal on one channel (two sends at the
same instant), a horizon merely *equal* to ``t`` still permits further
``t``-stamped arrivals on that channel; the engine therefore releases
an event at time ``t`` only once every peer that could still precede it
has promised strictly past ``t``:

  * delivery from peer i at t: peers with index < i must promise > t,
    peers with index > i must promise >= t;
  * local event at t: all peers must promise > t;
  * the channel's own SYNC timer at t: all peers must promise >= t
    (the non-strict rule; a strict gate would deadlock the bootstrap).

These gates only delay wall-clock execution, never virtual times, and
executability is monotone in the event order, so the executed sequence
is exactly the sorted order regardless of message arrival timing.

At t=0 every synchronized channel sends one bootstrap SYNC stamped with
its link latency (a mutual first-poll would deadlock at 0); the timer
is then due at the sync interval like after any other send.
"""

from __future__ import annotations

import heapq
import time
from collections import deque
from typing import Callable

from . import proto
from .proto import ChannelParams, Sync, WireMessage
from .shmq import ChannelEndpoint, PeerDisconnected
from .trace import Tracer

INFINITY_NS = 2**63 - 1

_KIND_DELIVERY = 0
_KIND_LOCAL = 1

_BLOCKED_SLEEP_S = 0.0002
_HEARTBEAT_WALL_S = 0.5


class SyncError(Exception):
    pass


class CausalityViolation(SyncError):
    """A peer broke its monotonicity promise; fatal, indicates a peer bug."""


class AttachAfterStart(SyncError):
    pass


class DeadlockTimeout(SyncError):
    """No progress for the configured wall-clock window while blocked."""


class Peer:
    """Per-peer receive state: horizon, pending deliveries, SYNC timer."""

    def __init__(self, index: int, endpoint: ChannelEndpoint, chan_id: str,
                 handler: Callable[[object], None]):
        self.index = index
        self.endpoint = endpoint
        self.chan_id = chan_id
        self.handler = handler
        self.params: ChannelParams = endpoint.params
        self.synchronized = endpoint.params.synchronized
        self.horizon = 0  # newest received timestamp, processed or not
        self.last_rx_ts = 0
        self.pending: deque[WireMessage] = deque()
        self.sync_due = 0  # local time the next SYNC must be sent


class KernelPort:
    """Send handle a component holds for one of its channels."""

    def __init__(self, kernel: "SimKernel", peer: Peer):
        self._kernel = kernel
        self.peer = peer

    @property
    def params(self) -> ChannelParams:
        return self.peer.params

    @property
    def chan_id(self) -> str:
        return self.peer.chan_id

    def send(self, body) -> None:
        self._kernel.send(self.peer, body)


class SimKernel:
    """Single-threaded event loop polling all peers of one component."""

    def __init__(self, component_id: str, tracer: Tracer | None = None,
                 deadlock_timeout_s: float | None = 30.0,
                 heartbeat: Callable[[int], None] | None = None):
        self.component_id = component_id
        self.tracer = tracer if tracer is not None else Tracer(component_id, None)
        self.now = 0
        self.peers: list[Peer] = []
        self._events: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = 0
        self._started = False
        self._deadlock_timeout_s = deadlock_timeout_s
        self._heartbeat = heartbeat
        self._last_heartbeat = time.monotonic()

    # --- wiring -----------------------------------------------------------

    def attach_peer(self, endpoint: ChannelEndpoint, chan_id: str,
                    handler: Callable[[object], None]) -> KernelPort:
        if self._started:
            raise AttachAfterStart("peers are fixed before the simulation starts")
        peer = Peer(len(self.peers), endpoint, chan_id, handler)
        self.peers.append(peer)
        return KernelPort(self, peer)

    # --- component-facing API ----------------------------------------------

    def schedule(self, at: int, fn: Callable[[], None]) -> None:
        assert at >= self.now, "cannot schedule into the past"
        heapq.heappush(self._events, (at, self._seq, fn))
        self._seq += 1

    def schedule_in(self, delay: int, fn: Callable[[], None]) -> None:
        self.schedule(self.now + delay, fn)

    def trace_local(self, tag: str, payload: bytes = b"") -> None:
        self.tracer.emit(self.now, "-", "local", tag, payload)

    def send(self, peer: Peer, body) -> None:
        """Stamp ``now + link latency``, enqueue, and push the channel's
        SYNC timer out to ``now + sync interval``."""
        ts = self.now + peer.params.link_latency_ns
        payload = proto.pack_payload(body)
        self.tracer.emit(self.now, peer.chan_id, "tx", body.TYPE.name, payload)
        block = proto.encode(WireMessage(ts, body), peer.params.slot_size_bytes)
        self._send_block(peer, block)
        if peer.synchronized:
            peer.sync_due = self.now + peer.params.sync_interval_ns

    def next_safe_horizon(self) -> int:
        """Minimum receive horizon over synchronized peers; +inf sentinel
        when there are none (unsynchronized free-run)."""
        h = INFINITY_NS
        for p in self.peers:
            if p.synchronized and p.horizon < h:
                h = p.horizon
        return h

    # --- internals ----------------------------------------------------------

    def _send_block(self, peer: Peer, block: bytes) -> None:
        # Backpressure is absorbed by blocking, never reordering; keep
        # draining inbound while stuck so two full queues cannot deadlock.
        deadline = (
            time.monotonic() + self._deadlock_timeout_s
            if self._deadlock_timeout_s is not None else None
        )
        spins = 0
        while not peer.endpoint.try_send_block(block):
            self._poll_all()
            spins += 1
            if spins > 100:
                time.sleep(_BLOCKED_SLEEP_S)
            if deadline is not None and time.monotonic() > deadline:
                raise DeadlockTimeout(f"send stuck on channel {peer.chan_id}")

    def _poll_peer(self, p: Peer) -> bool:
        block = p.endpoint.recv_block()
        if block is None:
            return False
        msg = proto.decode(block)
        if not p.synchronized:
            # Emulation mode: no horizons, deliver as soon as polled.
            if msg.body.TYPE != proto.MsgType.SYNC:
                payload = proto.pack_payload(msg.body)
                self.tracer.emit(self.now, p.chan_id, "rx", msg.body.TYPE.name, payload)
                p.handler(msg.body)
            return True
        if msg.timestamp < p.last_rx_ts or msg.timestamp < self.now:
            raise CausalityViolation(
                f"{self.component_id}: channel {p.chan_id} received t={msg.timestamp} "
                f"after t={p.last_rx_ts} at local time {self.now}"
            )
        p.last_rx_ts = msg.timestamp
        p.horizon = msg.timestamp
        p.pending.append(msg)
        return True

    def _poll_all(self) -> bool:
        got = False
        for p in self.peers:
            while self._poll_peer(p):
                got = True
        return got

    def _best_candidate(self):
        best = None
        for p in self.peers:
            if p.pending:
                key = (p.pending[0].timestamp, _KIND_DELIVERY, p.index)
                if best is None or key < best:
                    best = key
        if self._events:
            t, seq, _ = self._events[0]
            key = (t, _KIND_LOCAL, seq)
            if best is None or key < best:
                best = key
        return best

    def _fire_due_sync_timers(self, cap: int) -> bool:
        """Fire every SYNC timer due at or before ``cap`` whose non-strict
        gate (all horizons >= due) holds, in (due, peer index) order.

        Timers are kernel bookkeeping, not component events: they run
        before any delivery/local at the same time. Executability is
        monotone in due (the gate spans all peers), so the fire order is
        deterministic even though gating interleaves with polling.
        """
        fired = False
        while True:
            best = None
            for p in self.peers:
                if p.synchronized:
                    key = (p.sync_due, p.index)
                    if best is None or key < best:
                        best = key
            if best is None or best[0] > cap:
                return fired
            due, idx = best
            for p in self.peers:
                if p.synchronized and p.horizon < due:
                    return fired
            assert due >= self.now
            self.now = due
            self.send(self.peers[idx], Sync())
            fired = True

    def _executable(self, cand) -> bool:
        t, kind, sub = cand
        for p in self.peers:
            if not p.synchronized:
                continue
            if kind == _KIND_DELIVERY:
                if p.index == sub:
                    continue
                need_strict = p.index < sub
            else:
                need_strict = True
            if p.horizon < t or (need_strict and p.horizon == t):
                return False
        return True

    def _execute(self, cand) -> None:
        t, kind, sub = cand
        assert t >= self.now
        if __debug__:  # safety: never run past a synchronized peer's promise
            for p in self.peers:
                if p.synchronized and not (kind == _KIND_DELIVERY and p.index == sub):
                    assert p.horizon >= t, f"unsafe advance past {p.chan_id}"
        self.now = t
        if kind == _KIND_DELIVERY:
            p = self.peers[sub]
            msg = p.pending.popleft()
            assert msg.timestamp == t  # exact delivery at the stamped time
            body = msg.body
            payload = proto.pack_payload(body)
            self.tracer.emit(t, p.chan_id, "rx", body.TYPE.name, payload)
            if body.TYPE != proto.MsgType.SYNC:
                p.handler(body)
        else:
            _, _, fn = heapq.heappop(self._events)
            fn()

    def _maybe_heartbeat(self) -> None:
        if self._heartbeat is None:
            return
        wall = time.monotonic()
        if wall - self._last_heartbeat >= _HEARTBEAT_WALL_S:
            self._last_heartbeat = wall
            self._heartbeat(self.now)
            self.tracer.flush()

    def _check_peers_alive(self, needed_time: int) -> None:
        for p in self.peers:
            if not p.synchronized or p.horizon >= needed_time or p.pending:
                continue
            if not p.endpoint.peer_alive():
                # One last drain: the peer may have promised enough before exiting.
                if not self._poll_peer(p) and p.horizon < needed_time:
                    raise PeerDisconnected(
                        f"{self.component_id}: peer on {p.chan_id} exited at "
                        f"horizon {p.horizon} < {needed_time}"
                    )

    def run(self, until: int) -> None:
        """Run until no event before ``until`` can exist; events stamped
        exactly ``until`` or later do not execute."""
        if not self._started:
            self._started = True
            for p in self.peers:
                if p.synchronized:
                    self.send(p, Sync())
        deadline = (
            time.monotonic() + self._deadlock_timeout_s
            if self._deadlock_timeout_s is not None else None
        )
        while True:
            progressed = self._poll_all()
            cand = self._best_candidate()
            # SYNC timers due at or before the next event fire first (a
            # timer due exactly at an event precedes it, like a same-time
            # timer callback in any event loop); they also keep mutually
            # blocked components advancing each other.
            cap = min(cand[0] if cand is not None else INFINITY_NS, until - 1)
            if self._fire_due_sync_timers(cap):
                progressed = True
            if cand is None or cand[0] >= until:
                if self.next_safe_horizon() >= until:
                    break
                needed = until
            elif self._executable(cand):
                self._execute(cand)
                self._maybe_heartbeat()
                progressed = True
                needed = None
            else:
                needed = cand[0] + 1  # promises must strictly pass in the worst case
            if progressed:
                if deadline is not None:
                    deadline = time.monotonic() + self._deadlock_timeout_s
                continue
            if needed is not None:
                self._check_peers_alive(needed)
                self._maybe_heartbeat()
                time.sleep(_BLOCKED_SLEEP_S)
                if deadline is not None and time.monotonic() > deadline:
                    raise DeadlockTimeout(
                        f"{self.component_id}: no progress while waiting for "
                        f"t={needed} (horizons "
                        f"{[(p.chan_id, p.horizon) for p in self.peers]})"
                    )
        if self._heartbeat is not None:
            self._heartbeat(self.now)
        self.tracer.flush()

    # --- shutdown -----------------------------------------------------------

    def drain_until_peers_exit(self, timeout_s: float = 60.0) -> None:
        """Post-run shutdown: announce our own exit first (half-close the
        canary), then keep releasing inbound slots so peers still finishing
        never block on a full queue; return once every peer has EOFed."""
        for p in self.peers:
            p.endpoint.shutdown_write()
        deadline = time.monotonic() + timeout_s
        while True:
            alive = False
            for p in self.peers:
                while p.endpoint.recv_block() is not None:
                    pass
                if p.endpoint.sock is not None and p.endpoint.peer_alive():
                    alive = True
            if not alive:
                return
            if time.monotonic() > deadline:
                return
            time.sleep(0.001)
