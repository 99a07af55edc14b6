"""Declarative experiment configs: TOML parsing and topology validation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .. import frames
from ..proto import ChannelParams

COMPONENT_KINDS = ("host", "nic", "switch", "pktgen")

_CHANNEL_PARAM_KEYS = (
    "link_latency_ns", "sync_interval_ns", "slot_size_bytes",
    "queue_len_slots", "synchronized",
)


class ConfigError(Exception):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ComponentSpec:
    id: str
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class ChannelSpec:
    index: int
    a: tuple[str, str]  # (component id, port name)
    b: tuple[str, str]
    params: ChannelParams
    via_proxy: dict | None = None

    @property
    def chan_id(self) -> str:
        return f"ch{self.index}"


@dataclass
class ExperimentConfig:
    name: str
    duration_ns: int
    components: list[ComponentSpec]
    channels: list[ChannelSpec]

    def component(self, comp_id: str) -> ComponentSpec:
        for c in self.components:
            if c.id == comp_id:
                return c
        raise KeyError(comp_id)

    def channels_of(self, comp_id: str) -> list[ChannelSpec]:
        """Channels touching a component, in declaration (= attach) order."""
        out = []
        for ch in self.channels:
            if ch.a[0] == comp_id or ch.b[0] == comp_id:
                out.append(ch)
        return out


def _endpoint(text: str) -> tuple[str, str]:
    comp, dot, port = text.partition(".")
    if not dot or not comp or not port:
        raise ValueError(f"endpoint {text!r} is not <component>.<port>")
    return comp, port


def load_config(path: str) -> ExperimentConfig:
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    return parse_config(raw, default_name=os.path.splitext(os.path.basename(path))[0])


def parse_config(raw: dict, default_name: str = "experiment") -> ExperimentConfig:
    errors: list[str] = []
    name = raw.get("name", default_name)
    duration = raw.get("duration_ns", 0)
    defaults = raw.get("defaults", {})
    comps = []
    for c in raw.get("components", []):
        params = {k: v for k, v in c.items() if k not in ("id", "kind")}
        comps.append(ComponentSpec(id=c.get("id", ""), kind=c.get("kind", ""),
                                   params=params))
    channels = []
    for i, ch in enumerate(raw.get("channels", [])):
        try:
            a = _endpoint(ch["a"])
            b = _endpoint(ch["b"])
        except (KeyError, ValueError) as e:
            errors.append(f"channel {i}: {e}")
            continue
        merged = {k: defaults[k] for k in _CHANNEL_PARAM_KEYS if k in defaults}
        merged.update({k: ch[k] for k in _CHANNEL_PARAM_KEYS if k in ch})
        try:
            params = ChannelParams(**merged)
        except ValueError as e:
            errors.append(f"channel {i}: {e}")
            continue
        channels.append(ChannelSpec(index=i, a=a, b=b, params=params,
                                    via_proxy=ch.get("via_proxy")))
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(name=name, duration_ns=duration,
                            components=comps, channels=channels)


def _port_kind(comp_kind: str, port: str) -> str | None:
    """Interface kind a port speaks, or None for an unknown port name."""
    if comp_kind == "host":
        return "pcie" if port == "pci" else None
    if comp_kind == "nic":
        return {"pci": "pcie", "eth": "eth"}.get(port)
    if comp_kind == "pktgen":
        return "eth" if port == "eth" else None
    if comp_kind == "switch":
        if port.startswith("p") and port[1:].isdigit():
            return "eth"
        return None
    return None


def validate(config: ExperimentConfig) -> list[str]:
    """All topology-level errors, empty when the config is runnable."""
    errors: list[str] = []
    if config.duration_ns <= 0:
        errors.append("duration_ns must be > 0")

    by_id: dict[str, ComponentSpec] = {}
    for c in config.components:
        if not c.id:
            errors.append("component without id")
            continue
        if c.id in by_id:
            errors.append(f"duplicate component id {c.id!r}")
        by_id[c.id] = c
        if c.kind not in COMPONENT_KINDS:
            errors.append(f"{c.id}: unknown kind {c.kind!r}")

    used_ports: set[tuple[str, str]] = set()
    for ch in config.channels:
        for side in (ch.a, ch.b):
            comp_id, port = side
            if comp_id not in by_id:
                errors.append(f"{ch.chan_id}: unknown component {comp_id!r}")
                continue
            kind = by_id[comp_id].kind
            if kind in COMPONENT_KINDS and _port_kind(kind, port) is None:
                errors.append(f"{ch.chan_id}: {comp_id} ({kind}) has no port {port!r}")
            if side in used_ports:
                errors.append(f"{ch.chan_id}: port {comp_id}.{port} used more than once")
            used_ports.add(side)

    # Interface kinds must agree: PCIe pairs host.pci with nic.pci; the
    # Ethernet side pairs nic/pktgen/switch ports.
    for ch in config.channels:
        kinds = []
        for comp_id, port in (ch.a, ch.b):
            spec = by_id.get(comp_id)
            kinds.append(_port_kind(spec.kind, port) if spec else None)
        ka, kb = kinds
        if None in kinds:
            continue  # already reported above
        if ka != kb:
            errors.append(
                f"{ch.chan_id}: InterfaceKindMismatch: "
                f"{ch.a[0]}.{ch.a[1]} is {ka}, {ch.b[0]}.{ch.b[1]} is {kb}"
            )
        elif ka == "pcie":
            pair = {by_id[ch.a[0]].kind, by_id[ch.b[0]].kind}
            if pair != {"host", "nic"}:
                errors.append(f"{ch.chan_id}: InterfaceKindMismatch: PCIe must pair host and nic")

    # Wiring arity per kind.
    for c in config.components:
        if c.id not in by_id or by_id[c.id] is not c:
            continue
        chans = config.channels_of(c.id)
        ports = sorted(p for (cid, p) in used_ports if cid == c.id)
        if c.kind == "host" and len(chans) != 1:
            errors.append(f"{c.id}: a host needs exactly one pci channel")
        if c.kind == "nic" and sorted(ports) != ["eth", "pci"]:
            errors.append(f"{c.id}: a nic needs exactly its pci and eth channels")
        if c.kind == "pktgen" and len(chans) != 1:
            errors.append(f"{c.id}: a pktgen needs exactly one eth channel")
        if c.kind == "switch":
            n = c.params.get("ports", 0)
            want = [f"p{i}" for i in range(n)]
            if sorted(ports) != sorted(want):
                errors.append(f"{c.id}: switch declares ports={n} but wires {ports}")

    # The Ethernet topology must be loop-free (flooding would cycle).
    parent: dict[str, str] = {}

    def find(x: str) -> str:
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for ch in config.channels:
        if any(by_id.get(cid) is None for cid, _ in (ch.a, ch.b)):
            continue
        if _port_kind(by_id[ch.a[0]].kind, ch.a[1]) != "eth":
            continue
        if _port_kind(by_id[ch.b[0]].kind, ch.b[1]) != "eth":
            continue
        ra, rb = find(ch.a[0]), find(ch.b[0])
        if ra == rb:
            errors.append(f"{ch.chan_id}: LoopDetected in the Ethernet topology")
        else:
            parent[ra] = rb

    # Component-level parameter checks.
    for c in config.components:
        p = c.params
        if c.kind in ("host", "nic", "pktgen"):
            try:
                frames.parse_mac(p.get("mac", ""))
            except ValueError:
                errors.append(f"{c.id}: missing or malformed mac")
        if c.kind == "pktgen":
            rate = p.get("rate_pps", 0)
            if rate < 0 or (rate > 0 and 1_000_000_000 % rate):
                errors.append(f"{c.id}: PeriodNotIntegral: 1e9 ns not divisible by {rate} pps")
        if c.kind == "host" and "workload" in p:
            errors.extend(f"{c.id}: {e}" for e in _check_workload(p["workload"]))
        if c.kind != "host" and "workload" in p:
            errors.append(f"{c.id}: workloads bind to hosts only")
    return errors


def _check_workload(wl: dict) -> list[str]:
    errors = []
    kind = wl.get("kind")
    if kind not in ("pingpong", "stream"):
        errors.append(f"unknown workload kind {kind!r}")
        return errors
    if kind == "pingpong" and wl.get("initiator", False) and "dst_mac" not in wl:
        errors.append("pingpong initiator needs dst_mac")
    if kind == "stream" and wl.get("role", "send") == "send":
        rate = wl.get("rate_pps", 0)
        if rate <= 0 or 1_000_000_000 % rate:
            errors.append(f"PeriodNotIntegral: stream rate {rate} pps")
        if "dst_mac" not in wl:
            errors.append("stream sender needs dst_mac")
        if "duration_ns" not in wl:
            errors.append("stream sender needs duration_ns")
    return errors
