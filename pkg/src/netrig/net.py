"""Network components: a MAC-learning Ethernet switch and a packet
generator/sink, both speaking the Ethernet channel interface."""

from __future__ import annotations

import logging

from . import frames
from .proto import MIN_FRAME_LEN, Packet

log = logging.getLogger(__name__)

DEFAULT_MAC_TABLE_CAPACITY = 1024
DEFAULT_EGRESS_CAPACITY = 64


class PeriodNotIntegral(Exception):
    """1e9 must be divisible by the packet rate for a deterministic period."""


class _EgressPort:
    """Store-and-forward egress: FIFO, packet-count capacity, one packet
    in service at a time with a fixed forwarding delay."""

    def __init__(self, port, capacity: int, fwd_delay_ns: int):
        self.port = port
        self.capacity = capacity
        self.fwd_delay_ns = fwd_delay_ns
        self.queued = 0
        self.next_free = 0
        self.rx = 0
        self.tx = 0
        self.drop = 0


class EthernetSwitch:
    """Polls packets from each port, learns source MACs, switches to the
    learned egress port and floods unknown/group destinations."""

    def __init__(self, ctx, num_ports: int, fwd_delay_ns: int = 0,
                 egress_capacity: int = DEFAULT_EGRESS_CAPACITY,
                 mac_table_capacity: int = DEFAULT_MAC_TABLE_CAPACITY):
        self.ctx = ctx
        self.num_ports = num_ports
        self.fwd_delay_ns = fwd_delay_ns
        self.egress_capacity = egress_capacity
        self.mac_table_capacity = mac_table_capacity
        self.mac_table: dict[bytes, int] = {}
        self.runt_drops = 0
        self._ports: list[_EgressPort | None] = [None] * num_ports

    def port_names(self) -> list[str]:
        return [f"p{i}" for i in range(self.num_ports)]

    def bind_port(self, name: str, port) -> None:
        idx = int(name[1:])
        self._ports[idx] = _EgressPort(port, self.egress_capacity, self.fwd_delay_ns)

    def start(self) -> None:
        pass

    def on_message(self, port_name: str, body) -> None:
        if not isinstance(body, Packet):
            log.error("switch: non-packet message %r on %s", body, port_name)
            return
        self.forward(body.data, int(port_name[1:]))

    def forward(self, frame: bytes, ingress: int) -> None:
        self._ports[ingress].rx += 1
        if len(frame) < MIN_FRAME_LEN:
            self.runt_drops += 1
            return
        src = frames.src_mac(frame)
        dst = frames.dst_mac(frame)
        # Learning updates overwrite; new entries only while there is room.
        if src in self.mac_table or len(self.mac_table) < self.mac_table_capacity:
            self.mac_table[src] = ingress
        out = None if frames.is_group(dst) else self.mac_table.get(dst)
        if out is not None:
            self._enqueue(out, frame)
        else:
            for i in range(self.num_ports):
                if i != ingress:
                    self._enqueue(i, frame)

    def _enqueue(self, idx: int, frame: bytes) -> None:
        ep = self._ports[idx]
        if ep.queued >= ep.capacity:
            ep.drop += 1
            return
        ep.queued += 1
        start = max(self.ctx.now, ep.next_free)
        depart = start + ep.fwd_delay_ns
        ep.next_free = depart
        self.ctx.schedule(depart, lambda: self._depart(idx, frame))

    def _depart(self, idx: int, frame: bytes) -> None:
        ep = self._ports[idx]
        ep.queued -= 1
        ep.tx += 1
        ep.port.send(Packet(data=frame))

    def stats_lines(self) -> list[str]:
        lines = [
            f"port{i}.rx={ep.rx} port{i}.tx={ep.tx} port{i}.drop={ep.drop}"
            for i, ep in enumerate(self._ports)
        ]
        lines.append(f"runt_drops={self.runt_drops}")
        return lines

    def finish(self) -> list[str]:
        return self.stats_lines()


class PacketGenerator:
    """Injects frames at a fixed rate toward one destination MAC and
    counts everything it receives back (sink role)."""

    def __init__(self, ctx, mac: bytes, dst_mac: bytes, rate_pps: int,
                 gen_duration_ns: int, frame_len: int = 64,
                 warmup_broadcast: bool = False):
        if rate_pps < 0:
            raise ValueError("rate_pps must be >= 0")
        if rate_pps > 0 and 1_000_000_000 % rate_pps:
            raise PeriodNotIntegral(
                f"1e9 ns is not divisible by rate {rate_pps} pps"
            )
        self.ctx = ctx
        self.mac = mac
        self.dst_mac = dst_mac
        self.rate_pps = rate_pps
        self.gen_duration_ns = gen_duration_ns
        self.frame_len = frame_len
        # A broadcast as the very first frame teaches every switch this
        # source (like ARP would); broadcast flooding is MAC-table
        # independent, so warmed-up topologies never flood data frames.
        self.warmup_broadcast = warmup_broadcast
        self.period_ns = 1_000_000_000 // rate_pps if rate_pps else 0
        self.sent = 0
        self.received = 0
        self._port = None

    def port_names(self) -> list[str]:
        return ["eth"]

    def bind_port(self, name: str, port) -> None:
        self._port = port

    def start(self) -> None:
        # Rate 0 is pure sync traffic: nothing to schedule, the run still
        # terminates on SYNC liveness alone.
        if self.rate_pps > 0 and self.period_ns <= self.gen_duration_ns:
            self.ctx.schedule(self.period_ns, self._emit)

    def _emit(self) -> None:
        dst = self.dst_mac
        if self.warmup_broadcast and self.sent == 0:
            dst = frames.BROADCAST
        self.sent += 1
        frame = frames.build(dst, self.mac, self.sent, self.frame_len)
        self._port.send(Packet(data=frame))
        t_next = self.ctx.now + self.period_ns
        if t_next <= self.gen_duration_ns:
            self.ctx.schedule(t_next, self._emit)

    def on_message(self, port_name: str, body) -> None:
        if isinstance(body, Packet):
            self.received += 1

    def finish(self) -> list[str]:
        return [f"sent={self.sent}", f"recv={self.received}"]
