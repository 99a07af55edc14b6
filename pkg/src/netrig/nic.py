"""Behavioral NIC: one PCIe channel (device side) and one Ethernet
channel on a shared kernel, implementing the reference register map in
docs/refnic.md with descriptor DMA and MSI generation."""

from __future__ import annotations

import logging
import struct
from collections import deque

from .proto import (
    Bar,
    DeviceIntro,
    DmaCompl,
    DmaRead,
    DmaWrite,
    InitDev,
    Interrupt,
    IntStatus,
    IrqKind,
    MmioCompl,
    MmioRead,
    MmioWrite,
    Packet,
)

log = logging.getLogger(__name__)

VENDOR_ID = 0x5342
DEVICE_ID = 0x0001
PCI_CLASS_NETWORK = 0x02
BAR0_SIZE = 4096

REG_CTRL = 0x00
REG_TX_BASE = 0x08
REG_TX_LEN = 0x10
REG_TX_TAIL = 0x18
REG_RX_BASE = 0x20
REG_RX_LEN = 0x28
REG_RX_TAIL = 0x30
REG_IRQ_STATUS = 0x38
REG_DROPS = 0x40

CTRL_ENABLE = 1
IRQ_TX = 1
IRQ_RX = 2
DESC_FMT = "<QHHI"  # addr, len, flags, reserved
DESC_SIZE = 16
DESC_DONE = 1

VEC_TX_DONE = 0
VEC_RX = 1

DEFAULT_PIPELINE_DELAY_NS = 200

_MAPPED = {
    REG_CTRL, REG_TX_BASE, REG_TX_LEN, REG_TX_TAIL,
    REG_RX_BASE, REG_RX_LEN, REG_RX_TAIL, REG_IRQ_STATUS, REG_DROPS,
}


class SimNic:
    def __init__(self, ctx, mac: bytes,
                 tx_pipeline_delay_ns: int = DEFAULT_PIPELINE_DELAY_NS,
                 rx_pipeline_delay_ns: int = DEFAULT_PIPELINE_DELAY_NS):
        self.ctx = ctx
        self.mac = mac
        self.tx_pipeline_delay_ns = tx_pipeline_delay_ns
        self.rx_pipeline_delay_ns = rx_pipeline_delay_ns
        self.regs = {off: 0 for off in _MAPPED}
        self.dma_in_flight = {}  # req_id -> completion callback
        self._next_req_id = 0
        self._announced = False
        self._host_int_status = IntStatus()
        self._pci = None
        self._eth = None
        # device-side ring cursors
        self._tx_head = 0
        self._tx_busy = False
        self._rx_head = 0
        self._rx_busy = False
        self._rx_queue: deque[bytes] = deque()

    def port_names(self) -> list[str]:
        return ["pci", "eth"]

    def bind_port(self, name: str, port) -> None:
        if name == "pci":
            self._pci = port
        else:
            self._eth = port

    def start(self) -> None:
        self.announce()

    # --- PCIe side ----------------------------------------------------------

    def announce(self) -> None:
        if self._announced:
            log.error("nic %s: duplicate device announcement", self.mac.hex())
            return
        self._announced = True
        intro = DeviceIntro(
            vendor_id=VENDOR_ID,
            device_id=DEVICE_ID,
            pci_class=PCI_CLASS_NETWORK,
            bars=(Bar(size=BAR0_SIZE),),
            num_msi_vectors=2,
        )
        self._pci.send(InitDev(intro=intro))

    def on_message(self, port_name: str, body) -> None:
        if port_name == "eth":
            if isinstance(body, Packet):
                self.handle_eth(body.data)
            return
        if isinstance(body, MmioRead):
            self._pci.send(MmioCompl(req_id=body.req_id, data=self._reg_read(body)))
        elif isinstance(body, MmioWrite):
            self._reg_write(body)
            self._pci.send(MmioCompl(req_id=body.req_id, data=None))
        elif isinstance(body, DmaCompl):
            cb = self.dma_in_flight.pop(body.req_id, None)
            if cb is None:
                log.error("nic: DMA completion for unknown req %d", body.req_id)
                return
            cb(body.data)
        elif isinstance(body, IntStatus):
            self._host_int_status = body

    def _reg_read(self, m: MmioRead) -> bytes:
        base = m.offset & ~7
        if base not in _MAPPED:
            log.warning("nic: read of unmapped register %#x", m.offset)
            return b"\xff" * m.length
        value = self.regs[base]
        if base == REG_IRQ_STATUS:
            self.regs[REG_IRQ_STATUS] = 0  # read-to-ack
        return value.to_bytes(8, "little")[m.offset & 7 :][: m.length]

    def _reg_write(self, m: MmioWrite) -> None:
        base = m.offset & ~7
        if base not in _MAPPED:
            log.warning("nic: write to unmapped register %#x", m.offset)
            return
        old = self.regs[base]
        if base in (REG_IRQ_STATUS, REG_DROPS):
            return  # read-only / read-to-ack
        raw = bytearray(old.to_bytes(8, "little"))
        off = m.offset & 7
        raw[off : off + len(m.data)] = m.data
        self.regs[base] = int.from_bytes(raw, "little")
        if base == REG_TX_TAIL:
            self._tx_kick()
        elif base == REG_CTRL and not old & CTRL_ENABLE and self.regs[base] & CTRL_ENABLE:
            self._tx_kick()
            self._rx_kick()

    def _dma_read(self, addr: int, length: int, cb) -> None:
        req = self._next_req_id
        self._next_req_id += 1
        self.dma_in_flight[req] = cb
        self._pci.send(DmaRead(req_id=req, addr=addr, length=length))

    def _dma_write(self, addr: int, data: bytes) -> None:
        req = self._next_req_id
        self._next_req_id += 1
        self.dma_in_flight[req] = lambda _data: None  # posted; completion discarded
        self._pci.send(DmaWrite(req_id=req, addr=addr, data=data))

    def _irq(self, vector: int, status_bit: int) -> None:
        self.regs[REG_IRQ_STATUS] |= status_bit
        self._pci.send(Interrupt(kind=IrqKind.MSI, vector=vector))

    # --- TX path: doorbell order, one descriptor at a time -------------------

    def _tx_kick(self) -> None:
        if self._tx_busy or not self.regs[REG_CTRL] & CTRL_ENABLE:
            return
        if self._tx_head == self.regs[REG_TX_TAIL]:
            return
        self._tx_busy = True
        desc_addr = self.regs[REG_TX_BASE] + self._tx_head * DESC_SIZE
        self._dma_read(desc_addr, DESC_SIZE,
                       lambda data, a=desc_addr: self._tx_desc_fetched(a, data))

    def _tx_desc_fetched(self, desc_addr: int, data: bytes) -> None:
        addr, length, flags, _ = struct.unpack(DESC_FMT, data)
        self._dma_read(addr, length,
                       lambda payload: self._tx_payload_fetched(desc_addr, addr, payload))

    def _tx_payload_fetched(self, desc_addr: int, buf_addr: int, payload: bytes) -> None:
        self.ctx.schedule_in(self.tx_pipeline_delay_ns,
                             lambda: self._tx_emit(desc_addr, buf_addr, payload))

    def _tx_emit(self, desc_addr: int, buf_addr: int, payload: bytes) -> None:
        self._eth.send(Packet(data=payload))
        wb = struct.pack(DESC_FMT, buf_addr, len(payload), DESC_DONE, 0)
        self._dma_write(desc_addr, wb)
        # Posted writes stay ordered on the channel, so the interrupt may
        # follow immediately: the host sees DONE before the vector fires.
        self._irq(VEC_TX_DONE, IRQ_TX)
        self._tx_head = (self._tx_head + 1) % max(self.regs[REG_TX_LEN], 1)
        self._tx_busy = False
        self._tx_kick()

    # --- RX path --------------------------------------------------------------

    def _rx_free_slots(self) -> int:
        rlen = self.regs[REG_RX_LEN]
        if rlen == 0:
            return 0
        claimed = len(self._rx_queue) + (1 if self._rx_busy else 0)
        return (self.regs[REG_RX_TAIL] - self._rx_head) % rlen - claimed

    def handle_eth(self, frame: bytes) -> None:
        if not self.regs[REG_CTRL] & CTRL_ENABLE or self._rx_free_slots() <= 0:
            self.regs[REG_DROPS] += 1
            return
        self._rx_queue.append(frame)
        self._rx_kick()

    def _rx_kick(self) -> None:
        if self._rx_busy or not self._rx_queue:
            return
        if not self.regs[REG_CTRL] & CTRL_ENABLE:
            return
        self._rx_busy = True
        frame = self._rx_queue.popleft()
        self.ctx.schedule_in(self.rx_pipeline_delay_ns, lambda: self._rx_start(frame))

    def _rx_start(self, frame: bytes) -> None:
        desc_addr = self.regs[REG_RX_BASE] + self._rx_head * DESC_SIZE
        self._dma_read(desc_addr, DESC_SIZE,
                       lambda data, a=desc_addr: self._rx_desc_fetched(a, frame, data))

    def _rx_desc_fetched(self, desc_addr: int, frame: bytes, data: bytes) -> None:
        buf_addr, buf_cap, flags, _ = struct.unpack(DESC_FMT, data)
        if len(frame) > buf_cap:
            log.warning("nic: rx frame of %d bytes exceeds %d-byte buffer, dropped",
                        len(frame), buf_cap)
            self.regs[REG_DROPS] += 1
        else:
            self._dma_write(buf_addr, frame)
            wb = struct.pack(DESC_FMT, buf_addr, len(frame), DESC_DONE, 0)
            self._dma_write(desc_addr, wb)
            self._irq(VEC_RX, IRQ_RX)
            self._rx_head = (self._rx_head + 1) % max(self.regs[REG_RX_LEN], 1)
        self._rx_busy = False
        self._rx_kick()

    def finish(self) -> list[str]:
        return [f"rx_drops={self.regs[REG_DROPS]}"]
