"""Message catalog and slot encoding shared by every simulator process.

Two component interfaces are defined over the same slot format: a PCIe
interface between host and device simulators, and an Ethernet interface
between NICs and network simulators. Each message occupies exactly one
fixed-size slot:

    bytes [0..8)    little-endian u64 timestamp (virtual nanoseconds)
    bytes [8..12)   little-endian u32 payload length
    bytes [12..)    payload, layout per message type
    final byte      metadata: bit7 = slot owner, bits 0..6 = message type

``encode`` always leaves the owner bit clear; the transport flips it when
publishing a slot. All integers little-endian; both ends are assumed to
be little-endian machines (enforced by the shared-memory magic).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

HDR_FMT = "<QI"
HDR_SIZE = struct.calcsize(HDR_FMT)  # timestamp + payload length
META_SIZE = 1
OWNER_BIT = 0x80
TYPE_MASK = 0x7F

MIN_SLOT_SIZE = 128
DEFAULT_SLOT_SIZE = 4096  # fits a 4000-byte-MTU frame in one slot
DEFAULT_QUEUE_LEN = 64
DEFAULT_LINK_LATENCY_NS = 500

MIN_FRAME_LEN = 14  # dst(6) + src(6) + ethertype(2)


class ProtocolError(Exception):
    """Base for wire-format violations."""


class OversizedMessage(ProtocolError):
    """Encoded message does not fit in one slot."""


class UnknownType(ProtocolError):
    """Metadata byte carries a type outside the catalog."""


class TruncatedPayload(ProtocolError):
    """A declared length exceeds the bytes actually present."""


class MsgType(IntEnum):
    SYNC = 1
    INIT_DEV = 2
    DMA_READ = 3
    DMA_WRITE = 4
    MMIO_COMPL = 5
    INTERRUPT = 6
    DMA_COMPL = 7
    MMIO_READ = 8
    MMIO_WRITE = 9
    INT_STATUS = 10
    PACKET = 11


class IrqKind(IntEnum):
    LEGACY = 0
    MSI = 1
    MSIX = 2


def slot_capacity(slot_size: int) -> int:
    """Payload bytes available in one slot."""
    return slot_size - HDR_SIZE - META_SIZE


@dataclass
class ChannelParams:
    """Per-link parameters agreed between the two ends of a channel.

    ``link_latency_ns`` is the virtual propagation delay every message
    incurs; ``sync_interval_ns`` is the maximum virtual-time gap between
    consecutive sends before a SYNC is emitted, and defaults to the link
    latency.
    """

    link_latency_ns: int = DEFAULT_LINK_LATENCY_NS
    sync_interval_ns: int | None = None
    slot_size_bytes: int = DEFAULT_SLOT_SIZE
    queue_len_slots: int = DEFAULT_QUEUE_LEN
    synchronized: bool = True

    def __post_init__(self) -> None:
        if self.sync_interval_ns is None:
            self.sync_interval_ns = self.link_latency_ns
        if self.link_latency_ns <= 0:
            raise ValueError("link_latency_ns must be > 0")
        if not 0 < self.sync_interval_ns <= self.link_latency_ns:
            raise ValueError("sync_interval_ns must be in (0, link_latency_ns]")
        if self.slot_size_bytes < MIN_SLOT_SIZE or self.slot_size_bytes % 64:
            raise ValueError("slot_size_bytes must be a multiple of 64 and >= 128")
        if self.queue_len_slots < 2:
            raise ValueError("queue_len_slots must be >= 2")


# --- message bodies -------------------------------------------------------


@dataclass(frozen=True)
class Sync:
    TYPE = MsgType.SYNC


@dataclass(frozen=True)
class Bar:
    """One base address register: size in bytes (power of two or 0)."""

    size: int
    dummy: bool = False

    def __post_init__(self) -> None:
        if self.size < 0 or (self.size & (self.size - 1)):
            raise ValueError("BAR size must be a power of two or zero")


@dataclass(frozen=True)
class DeviceIntro:
    """PCI identity a device announces: ids, BARs, interrupt vector counts."""

    vendor_id: int
    device_id: int
    pci_class: int
    pci_subclass: int = 0
    pci_revision: int = 0
    bars: tuple[Bar, ...] = ()
    num_msi_vectors: int = 0
    num_msix_vectors: int = 0
    msix_table_bar: int = 0
    msix_table_offset: int = 0
    msix_pba_bar: int = 0
    msix_pba_offset: int = 0

    def __post_init__(self) -> None:
        if len(self.bars) > 6:
            raise ValueError("at most 6 BARs")


@dataclass(frozen=True)
class InitDev:
    TYPE = MsgType.INIT_DEV
    intro: DeviceIntro


@dataclass(frozen=True)
class DmaRead:
    TYPE = MsgType.DMA_READ
    req_id: int = 0
    addr: int = 0
    length: int = 0

    def __post_init__(self) -> None:
        if self.length < 1:
            raise ValueError("DMA read length must be >= 1")


@dataclass(frozen=True)
class DmaWrite:
    TYPE = MsgType.DMA_WRITE
    req_id: int = 0
    addr: int = 0
    data: bytes = b""

    def __post_init__(self) -> None:
        if not self.data:
            raise ValueError("DMA write carries at least one byte")


@dataclass(frozen=True)
class MmioCompl:
    TYPE = MsgType.MMIO_COMPL
    req_id: int = 0
    data: bytes | None = None  # None for write completions

    def __post_init__(self) -> None:
        if self.data is not None and len(self.data) == 0:
            raise ValueError("read completion data must be non-empty; use None")


@dataclass(frozen=True)
class Interrupt:
    TYPE = MsgType.INTERRUPT
    kind: IrqKind = IrqKind.MSI
    vector: int = 0


@dataclass(frozen=True)
class DmaCompl:
    TYPE = MsgType.DMA_COMPL
    req_id: int = 0
    data: bytes | None = None  # None for write completions

    def __post_init__(self) -> None:
        if self.data is not None and len(self.data) == 0:
            raise ValueError("read completion data must be non-empty; use None")


@dataclass(frozen=True)
class MmioRead:
    TYPE = MsgType.MMIO_READ
    req_id: int = 0
    bar: int = 0
    offset: int = 0
    length: int = 0

    def __post_init__(self) -> None:
        if self.length not in (1, 2, 4, 8):
            raise ValueError("MMIO length must be 1, 2, 4 or 8")


@dataclass(frozen=True)
class MmioWrite:
    TYPE = MsgType.MMIO_WRITE
    req_id: int = 0
    bar: int = 0
    offset: int = 0
    data: bytes = b""

    def __post_init__(self) -> None:
        if len(self.data) not in (1, 2, 4, 8):
            raise ValueError("MMIO length must be 1, 2, 4 or 8")


@dataclass(frozen=True)
class IntStatus:
    TYPE = MsgType.INT_STATUS
    legacy_enabled: bool = False
    msi_enabled: bool = False
    msix_enabled: bool = False


@dataclass(frozen=True)
class Packet:
    TYPE = MsgType.PACKET
    data: bytes = b""

    def __post_init__(self) -> None:
        if len(self.data) < MIN_FRAME_LEN:
            raise ValueError(f"frame shorter than {MIN_FRAME_LEN} bytes")
        if len(self.data) > 0xFFFF:
            raise ValueError("frame length exceeds u16")


MsgBody = (
    Sync
    | InitDev
    | DmaRead
    | DmaWrite
    | MmioCompl
    | Interrupt
    | DmaCompl
    | MmioRead
    | MmioWrite
    | IntStatus
    | Packet
)


@dataclass(frozen=True)
class WireMessage:
    timestamp: int
    body: MsgBody

    @property
    def msg_type(self) -> MsgType:
        return self.body.TYPE


# --- payload packing ------------------------------------------------------

_INTRO_FMT = "<HHBBBB" + "QB" * 6 + "HHBBQQ"
_DMA_R_FMT = "<QQI"
_DMA_W_FMT = "<QQI"
_COMPL_FMT = "<QB"
_IRQ_FMT = "<BI"
_MMIO_R_FMT = "<QBQI"
_MMIO_W_FMT = "<QBQI"
_INTSTATUS_FMT = "<BBB"
_PKT_FMT = "<H"


def _pack_intro(m: InitDev) -> bytes:
    d = m.intro
    bar_fields: list[int] = []
    for i in range(6):
        if i < len(d.bars):
            bar_fields += [d.bars[i].size, 1 if d.bars[i].dummy else 0]
        else:
            bar_fields += [0, 0]
    return struct.pack(
        _INTRO_FMT,
        d.vendor_id,
        d.device_id,
        d.pci_class,
        d.pci_subclass,
        d.pci_revision,
        len(d.bars),
        *bar_fields,
        d.num_msi_vectors,
        d.num_msix_vectors,
        d.msix_table_bar,
        d.msix_pba_bar,
        d.msix_table_offset,
        d.msix_pba_offset,
    )


def _unpack_intro(p: bytes) -> InitDev:
    f = struct.unpack(_INTRO_FMT, p)
    nbars = f[5]
    if nbars > 6:
        raise TruncatedPayload("BAR count exceeds 6")
    bars = tuple(Bar(size=f[6 + 2 * i], dummy=bool(f[7 + 2 * i])) for i in range(nbars))
    return InitDev(
        intro=DeviceIntro(
            vendor_id=f[0],
            device_id=f[1],
            pci_class=f[2],
            pci_subclass=f[3],
            pci_revision=f[4],
            bars=bars,
            num_msi_vectors=f[18],
            num_msix_vectors=f[19],
            msix_table_bar=f[20],
            msix_pba_bar=f[21],
            msix_table_offset=f[22],
            msix_pba_offset=f[23],
        )
    )


def pack_payload(body: MsgBody) -> bytes:
    t = body.TYPE
    if t == MsgType.SYNC:
        return b""
    if t == MsgType.INIT_DEV:
        return _pack_intro(body)
    if t == MsgType.DMA_READ:
        return struct.pack(_DMA_R_FMT, body.req_id, body.addr, body.length)
    if t == MsgType.DMA_WRITE:
        return struct.pack(_DMA_W_FMT, body.req_id, body.addr, len(body.data)) + body.data
    if t in (MsgType.MMIO_COMPL, MsgType.DMA_COMPL):
        has = body.data is not None
        return struct.pack(_COMPL_FMT, body.req_id, int(has)) + (body.data or b"")
    if t == MsgType.INTERRUPT:
        return struct.pack(_IRQ_FMT, int(body.kind), body.vector)
    if t == MsgType.MMIO_READ:
        return struct.pack(_MMIO_R_FMT, body.req_id, body.bar, body.offset, body.length)
    if t == MsgType.MMIO_WRITE:
        return (
            struct.pack(_MMIO_W_FMT, body.req_id, body.bar, body.offset, len(body.data))
            + body.data
        )
    if t == MsgType.INT_STATUS:
        return struct.pack(
            _INTSTATUS_FMT,
            int(body.legacy_enabled),
            int(body.msi_enabled),
            int(body.msix_enabled),
        )
    if t == MsgType.PACKET:
        return struct.pack(_PKT_FMT, len(body.data)) + body.data
    raise UnknownType(f"cannot pack type {t}")


def _need(p: bytes, n: int, what: str) -> None:
    if len(p) < n:
        raise TruncatedPayload(f"{what}: need {n} bytes, have {len(p)}")


def unpack_payload(msg_type: int, p: bytes) -> MsgBody:
    try:
        t = MsgType(msg_type)
    except ValueError:
        raise UnknownType(f"type byte {msg_type:#x} not in catalog") from None
    if t == MsgType.SYNC:
        if p:
            raise TruncatedPayload("SYNC carries no payload")
        return Sync()
    if t == MsgType.INIT_DEV:
        _need(p, struct.calcsize(_INTRO_FMT), "INIT_DEV")
        return _unpack_intro(p[: struct.calcsize(_INTRO_FMT)])
    if t == MsgType.DMA_READ:
        _need(p, struct.calcsize(_DMA_R_FMT), "DMA_READ")
        req, addr, length = struct.unpack(_DMA_R_FMT, p)
        return DmaRead(req_id=req, addr=addr, length=length)
    if t == MsgType.DMA_WRITE:
        n = struct.calcsize(_DMA_W_FMT)
        _need(p, n, "DMA_WRITE")
        req, addr, length = struct.unpack(_DMA_W_FMT, p[:n])
        if len(p) - n != length:
            raise TruncatedPayload("DMA_WRITE data length mismatch")
        return DmaWrite(req_id=req, addr=addr, data=p[n:])
    if t in (MsgType.MMIO_COMPL, MsgType.DMA_COMPL):
        n = struct.calcsize(_COMPL_FMT)
        _need(p, n, "completion")
        req, has = struct.unpack(_COMPL_FMT, p[:n])
        data = p[n:] if has else None
        if has and not p[n:]:
            raise TruncatedPayload("completion flags data but carries none")
        if not has and p[n:]:
            raise TruncatedPayload("completion carries unexpected data")
        cls = MmioCompl if t == MsgType.MMIO_COMPL else DmaCompl
        return cls(req_id=req, data=data)
    if t == MsgType.INTERRUPT:
        _need(p, struct.calcsize(_IRQ_FMT), "INTERRUPT")
        kind, vector = struct.unpack(_IRQ_FMT, p)
        return Interrupt(kind=IrqKind(kind), vector=vector)
    if t == MsgType.MMIO_READ:
        _need(p, struct.calcsize(_MMIO_R_FMT), "MMIO_READ")
        req, bar, off, length = struct.unpack(_MMIO_R_FMT, p)
        return MmioRead(req_id=req, bar=bar, offset=off, length=length)
    if t == MsgType.MMIO_WRITE:
        n = struct.calcsize(_MMIO_W_FMT)
        _need(p, n, "MMIO_WRITE")
        req, bar, off, length = struct.unpack(_MMIO_W_FMT, p[:n])
        if len(p) - n != length:
            raise TruncatedPayload("MMIO_WRITE data length mismatch")
        return MmioWrite(req_id=req, bar=bar, offset=off, data=p[n:])
    if t == MsgType.INT_STATUS:
        _need(p, struct.calcsize(_INTSTATUS_FMT), "INT_STATUS")
        legacy, msi, msix = struct.unpack(_INTSTATUS_FMT, p)
        return IntStatus(
            legacy_enabled=bool(legacy), msi_enabled=bool(msi), msix_enabled=bool(msix)
        )
    if t == MsgType.PACKET:
        n = struct.calcsize(_PKT_FMT)
        _need(p, n, "PACKET")
        (length,) = struct.unpack(_PKT_FMT, p[:n])
        if len(p) - n != length:
            raise TruncatedPayload("PACKET data length mismatch")
        return Packet(data=p[n:])
    raise UnknownType(f"type byte {msg_type:#x} not in catalog")


def encode(msg: WireMessage, slot_size: int) -> bytes:
    """Encode into one slot-sized block; the owner bit is left clear."""
    payload = pack_payload(msg.body)
    if len(payload) > slot_capacity(slot_size):
        raise OversizedMessage(
            f"{msg.msg_type.name} payload of {len(payload)} bytes exceeds "
            f"slot capacity {slot_capacity(slot_size)}"
        )
    block = bytearray(slot_size)
    struct.pack_into(HDR_FMT, block, 0, msg.timestamp, len(payload))
    block[HDR_SIZE : HDR_SIZE + len(payload)] = payload
    block[-1] = int(msg.msg_type) & TYPE_MASK
    return bytes(block)


def decode(block: bytes) -> WireMessage:
    """Exact inverse of ``encode``; the owner bit is ignored."""
    if len(block) < MIN_SLOT_SIZE:
        raise TruncatedPayload("block smaller than minimum slot")
    msg_type = block[-1] & TYPE_MASK
    timestamp, plen = struct.unpack_from(HDR_FMT, block, 0)
    if plen > slot_capacity(len(block)):
        raise TruncatedPayload(
            f"declared payload {plen} exceeds slot capacity {slot_capacity(len(block))}"
        )
    body = unpack_payload(msg_type, bytes(block[HDR_SIZE : HDR_SIZE + plen]))
    return WireMessage(timestamp=timestamp, body=body)
