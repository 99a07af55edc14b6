"""Component construction shared by the multi-process runner and the
single-process reference executor, so both run identical logic."""

from __future__ import annotations

from .. import frames
from ..host import DEFAULT_MEM_SIZE, HostTimingModel, SimHost
from ..net import (
    DEFAULT_EGRESS_CAPACITY,
    DEFAULT_MAC_TABLE_CAPACITY,
    EthernetSwitch,
    PacketGenerator,
)
from ..nic import DEFAULT_PIPELINE_DELAY_NS, SimNic
from .config import ComponentSpec, ExperimentConfig
from .monolith import SingleProcessNet


def make_component(ctx, spec: ComponentSpec):
    p = spec.params
    if spec.kind == "host":
        timing = HostTimingModel(
            mmio_issue_delay_ns=p.get("mmio_issue_delay_ns", 0),
            interrupt_entry_delay_ns=p.get("interrupt_entry_delay_ns", 0),
            per_packet_processing_ns=p.get("per_packet_processing_ns", 0),
        )
        return SimHost(ctx, frames.parse_mac(p["mac"]), timing=timing,
                       workload=p.get("workload"),
                       mem_size=p.get("mem_size", DEFAULT_MEM_SIZE))
    if spec.kind == "nic":
        return SimNic(ctx, frames.parse_mac(p["mac"]),
                      tx_pipeline_delay_ns=p.get("tx_pipeline_delay_ns",
                                                 DEFAULT_PIPELINE_DELAY_NS),
                      rx_pipeline_delay_ns=p.get("rx_pipeline_delay_ns",
                                                 DEFAULT_PIPELINE_DELAY_NS))
    if spec.kind == "switch":
        return EthernetSwitch(ctx, p["ports"],
                              fwd_delay_ns=p.get("fwd_delay_ns", 0),
                              egress_capacity=p.get("egress_capacity",
                                                    DEFAULT_EGRESS_CAPACITY),
                              mac_table_capacity=p.get("mac_table_capacity",
                                                       DEFAULT_MAC_TABLE_CAPACITY))
    if spec.kind == "pktgen":
        return PacketGenerator(ctx, frames.parse_mac(p["mac"]),
                               frames.parse_mac(p["dst_mac"]),
                               rate_pps=p.get("rate_pps", 0),
                               gen_duration_ns=p.get("gen_duration_ns", 0),
                               frame_len=p.get("frame_len", 64),
                               warmup_broadcast=p.get("warmup_broadcast", False))
    raise ValueError(f"unknown component kind {spec.kind!r}")


def build_monolith(config: ExperimentConfig, trace_dir: str | None = None) -> SingleProcessNet:
    """Assemble the whole topology on one event queue with direct
    latency-delayed delivery; channel ids and attach order match the
    multi-process wiring so canonical traces are comparable."""
    net = SingleProcessNet()
    for comp in config.components:
        trace_path = f"{trace_dir}/{comp.id}.trace" if trace_dir else None
        ctx = net.add_component(comp.id, trace_path)
        net.register(ctx, make_component(ctx, comp))
    for ch in config.channels:
        net.connect(ch.a, ch.b, ch.params, ch.chan_id)
    return net
