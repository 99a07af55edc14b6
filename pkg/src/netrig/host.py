"""Synthetic host simulator.

Owns guest memory, exposes the PCIe host side (MMIO issue, DMA service,
interrupt delivery), runs a register-level driver for the reference NIC
(docs/refnic.md) and executes ping-pong or stream workloads.

Driver and workload code are plain generators that yield small request
objects (MMIO access, sleep, wait-for-frame); the host resumes them
when the matching completion or event arrives, all in virtual time on
the single event loop. An MMIO access blocks only the task that issued
it: DMA requests arriving while a completion is pending are still
served.
"""

from __future__ import annotations

import logging
import struct
from collections import deque
from dataclasses import dataclass

from . import frames
from .nic import (
    CTRL_ENABLE,
    DESC_DONE,
    DESC_FMT,
    DESC_SIZE,
    REG_CTRL,
    REG_RX_BASE,
    REG_RX_LEN,
    REG_RX_TAIL,
    REG_TX_BASE,
    REG_TX_LEN,
    REG_TX_TAIL,
    VEC_RX,
    VEC_TX_DONE,
)
from .proto import (
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
)

log = logging.getLogger(__name__)

DEFAULT_MEM_SIZE = 16 * 1024 * 1024

RING_LEN = 64
BUF_SIZE = 2048
TX_RING_ADDR = 0x1000
RX_RING_ADDR = 0x2000
TX_BUF_ADDR = 0x10000
RX_BUF_ADDR = 0x40000

DEFAULT_WORKLOAD_TIMEOUT_NS = 1_000_000


class HostError(Exception):
    pass


class CompletionIdMismatch(HostError):
    """Completion for a request this host never issued; fatal."""


class DmaOutOfRange(HostError):
    """Device access outside guest memory; fatal."""


class WorkloadTimeout(HostError):
    """Workload made no progress within its virtual-time budget."""


@dataclass
class HostTimingModel:
    mmio_issue_delay_ns: int = 0
    interrupt_entry_delay_ns: int = 0
    per_packet_processing_ns: int = 0

    def __post_init__(self) -> None:
        if min(self.mmio_issue_delay_ns, self.interrupt_entry_delay_ns,
               self.per_packet_processing_ns) < 0:
            raise ValueError("host delays must be >= 0")


class GuestMemory:
    def __init__(self, size: int = DEFAULT_MEM_SIZE):
        self.size = size
        self._mem = bytearray(size)

    def _check(self, addr: int, length: int) -> None:
        if addr < 0 or length < 0 or addr + length > self.size:
            raise DmaOutOfRange(f"access [{addr:#x}, +{length}) outside {self.size:#x}")

    def read(self, addr: int, length: int) -> bytes:
        self._check(addr, length)
        return bytes(self._mem[addr : addr + length])

    def write(self, addr: int, data: bytes) -> None:
        self._check(addr, len(data))
        self._mem[addr : addr + len(data)] = data


# Requests a driver/workload generator may yield.


@dataclass
class OpMmioRead:
    bar: int
    offset: int
    length: int = 8


@dataclass
class OpMmioWrite:
    bar: int
    offset: int
    data: bytes


@dataclass
class OpSleep:
    delay_ns: int


@dataclass
class OpWaitRx:
    timeout_ns: int | None = None


@dataclass
class OpWaitTxCredit:
    timeout_ns: int | None = None


class _Task:
    def __init__(self, gen, name: str):
        self.gen = gen
        self.name = name
        self.wait_gen = 0  # invalidates stale wait timeouts on resume


class SimHost:
    def __init__(self, ctx, mac: bytes, timing: HostTimingModel | None = None,
                 workload: dict | None = None, mem_size: int = DEFAULT_MEM_SIZE):
        self.ctx = ctx
        self.mac = mac
        self.timing = timing if timing is not None else HostTimingModel()
        self.workload = workload
        self.mem = GuestMemory(mem_size)
        self.device_intro = None
        self.int_enabled = IntStatus()
        self.results: list[str] = []
        self._pci = None
        self._next_req_id = 0
        self._mmio_waiters: dict[int, _Task] = {}
        # driver state
        self._driver_ready = False
        self._tx_next = 0       # next tx descriptor slot to fill
        self._tx_clean = 0      # next tx descriptor slot to reap
        self._tx_outstanding = 0
        self._rx_clean = 0      # next rx descriptor slot the driver checks
        self._rx_post = 0       # ring position where the next buffer is posted
        self._rx_fifo: deque[bytes] = deque()
        self._rx_waiters: deque[_Task] = deque()
        self._credit_waiters: deque[_Task] = deque()

    def port_names(self) -> list[str]:
        return ["pci"]

    def bind_port(self, name: str, port) -> None:
        self._pci = port

    def start(self) -> None:
        pass  # everything is driven by the device's INIT_DEV

    # --- task machinery -------------------------------------------------------

    def _spawn(self, gen, name: str) -> None:
        self._step(_Task(gen, name), None)

    def _step(self, task: _Task, value) -> None:
        task.wait_gen += 1
        try:
            op = task.gen.send(value)
        except StopIteration:
            return
        self._dispatch(task, op)

    def _throw(self, task: _Task, exc: Exception) -> None:
        try:
            task.gen.throw(exc)
        except StopIteration:
            return
        except type(exc):
            raise

    def _dispatch(self, task: _Task, op) -> None:
        if isinstance(op, (OpMmioRead, OpMmioWrite)):
            self.ctx.schedule_in(self.timing.mmio_issue_delay_ns,
                                 lambda: self._issue_mmio(task, op))
        elif isinstance(op, OpSleep):
            self.ctx.schedule_in(op.delay_ns, lambda: self._step(task, None))
        elif isinstance(op, OpWaitRx):
            if self._rx_fifo:
                self._step(task, self._rx_fifo.popleft())
            else:
                self._rx_waiters.append(task)
                self._arm_timeout(task, self._rx_waiters, op.timeout_ns)
        elif isinstance(op, OpWaitTxCredit):
            if self._tx_outstanding < RING_LEN - 1:
                self._step(task, None)
            else:
                self._credit_waiters.append(task)
                self._arm_timeout(task, self._credit_waiters, op.timeout_ns)
        else:
            raise HostError(f"workload yielded unknown op {op!r}")

    def _arm_timeout(self, task: _Task, queue: deque, timeout_ns: int | None) -> None:
        if timeout_ns is None:
            return
        armed_gen = task.wait_gen

        def expire():
            # Only the wait that armed this timer may trip it.
            if task.wait_gen == armed_gen and task in queue:
                queue.remove(task)
                self._throw(task, WorkloadTimeout(
                    f"{task.name}: no progress within {timeout_ns} ns"))

        self.ctx.schedule_in(timeout_ns, expire)

    def _issue_mmio(self, task: _Task, op) -> None:
        req = self._next_req_id
        self._next_req_id += 1
        self._mmio_waiters[req] = task
        if isinstance(op, OpMmioRead):
            self._pci.send(MmioRead(req_id=req, bar=op.bar, offset=op.offset,
                                    length=op.length))
        else:
            self._pci.send(MmioWrite(req_id=req, bar=op.bar, offset=op.offset,
                                     data=op.data))

    # --- PCIe message handling --------------------------------------------------

    def on_message(self, port_name: str, body) -> None:
        if isinstance(body, InitDev):
            self.device_intro = body.intro
            self._spawn(self._driver_init(), "driver_init")
        elif isinstance(body, MmioCompl):
            task = self._mmio_waiters.pop(body.req_id, None)
            if task is None:
                raise CompletionIdMismatch(f"MMIO completion for unknown req {body.req_id}")
            self._step(task, body.data)
        elif isinstance(body, (DmaRead, DmaWrite)):
            self.serve_dma(body)
        elif isinstance(body, Interrupt):
            self.deliver_interrupt(body)

    def serve_dma(self, msg) -> None:
        if isinstance(msg, DmaRead):
            data = self.mem.read(msg.addr, msg.length)
            self._pci.send(DmaCompl(req_id=msg.req_id, data=data))
        else:
            self.mem.write(msg.addr, msg.data)
            self._pci.send(DmaCompl(req_id=msg.req_id, data=None))

    def deliver_interrupt(self, msg: Interrupt) -> None:
        enabled = {
            IrqKind.LEGACY: self.int_enabled.legacy_enabled,
            IrqKind.MSI: self.int_enabled.msi_enabled,
            IrqKind.MSIX: self.int_enabled.msix_enabled,
        }[msg.kind]
        if not enabled:
            log.warning("host %s: dropping %s interrupt, mechanism disabled",
                        frames.format_mac(self.mac), msg.kind.name)
            return
        handler = {VEC_TX_DONE: self._irq_tx_done, VEC_RX: self._irq_rx}.get(msg.vector)
        if handler is None:
            log.warning("host: interrupt for unknown vector %d", msg.vector)
            return
        self.ctx.schedule_in(self.timing.interrupt_entry_delay_ns, handler)

    # --- reference NIC driver -----------------------------------------------------

    def _desc_addr(self, ring_addr: int, idx: int) -> int:
        return ring_addr + idx * DESC_SIZE

    def _write_desc(self, ring_addr: int, idx: int, buf_addr: int, length: int,
                    flags: int) -> None:
        self.mem.write(self._desc_addr(ring_addr, idx),
                       struct.pack(DESC_FMT, buf_addr, length, flags, 0))

    def _read_desc(self, ring_addr: int, idx: int):
        return struct.unpack(DESC_FMT, self.mem.read(self._desc_addr(ring_addr, idx),
                                                     DESC_SIZE))

    def _driver_init(self):
        # Announce which interrupt mechanisms the OS enabled, then bring
        # the device up: rings, posted rx buffers, enable.
        self.int_enabled = IntStatus(msi_enabled=True)
        self._pci.send(self.int_enabled)
        regs = (
            (REG_TX_BASE, TX_RING_ADDR),
            (REG_TX_LEN, RING_LEN),
            (REG_RX_BASE, RX_RING_ADDR),
            (REG_RX_LEN, RING_LEN),
        )
        for off, value in regs:
            yield OpMmioWrite(bar=0, offset=off, data=value.to_bytes(8, "little"))
        for i in range(RING_LEN - 1):  # exclusive tail: one slot stays unused
            self._write_desc(RX_RING_ADDR, i, RX_BUF_ADDR + i * BUF_SIZE, BUF_SIZE, 0)
        self._rx_post = RING_LEN - 1
        yield OpMmioWrite(bar=0, offset=REG_RX_TAIL,
                          data=(RING_LEN - 1).to_bytes(8, "little"))
        yield OpMmioWrite(bar=0, offset=REG_CTRL, data=CTRL_ENABLE.to_bytes(8, "little"))
        self._driver_ready = True
        wl = self._make_workload()
        if wl is not None:
            self._spawn(wl, self.workload["kind"])

    def _irq_tx_done(self) -> None:
        while self._tx_outstanding > 0:
            buf_addr, length, fl, _ = self._read_desc(TX_RING_ADDR, self._tx_clean)
            if not fl & DESC_DONE:
                break
            self._write_desc(TX_RING_ADDR, self._tx_clean, buf_addr, length, 0)
            self._tx_clean = (self._tx_clean + 1) % RING_LEN
            self._tx_outstanding -= 1
            if self._credit_waiters:
                self._step(self._credit_waiters.popleft(), None)

    def _irq_rx(self) -> None:
        reposted = 0
        while True:
            buf_addr, length, fl, _ = self._read_desc(RX_RING_ADDR, self._rx_clean)
            if not fl & DESC_DONE:
                break
            frame = self.mem.read(buf_addr, length)
            self._rx_clean = (self._rx_clean + 1) % RING_LEN
            # Recycle the buffer at the ring's post position so the valid
            # region stays contiguous behind the exclusive tail.
            self._write_desc(RX_RING_ADDR, self._rx_post, buf_addr, BUF_SIZE, 0)
            self._rx_post = (self._rx_post + 1) % RING_LEN
            reposted += 1
            self.ctx.schedule_in(self.timing.per_packet_processing_ns,
                                 lambda f=frame: self._deliver_frame(f))
        if reposted:
            self._spawn(self._repost(self._rx_post), "rx_repost")

    def _repost(self, new_tail: int):
        yield OpMmioWrite(bar=0, offset=REG_RX_TAIL, data=new_tail.to_bytes(8, "little"))

    def _deliver_frame(self, frame: bytes) -> None:
        if self._rx_waiters:
            self._step(self._rx_waiters.popleft(), frame)
        else:
            self._rx_fifo.append(frame)

    def _send_frame(self, dst: bytes, seq: int, frame_len: int):
        """Generator step: place one frame in the tx ring and ring the
        doorbell. Blocks (virtual time) on ring space and the doorbell
        completion."""
        if self.timing.per_packet_processing_ns:
            yield OpSleep(self.timing.per_packet_processing_ns)
        if self._tx_outstanding >= RING_LEN - 1:
            yield OpWaitTxCredit()
        slot = self._tx_next
        frame = frames.build(dst, self.mac, seq, frame_len)
        buf_addr = TX_BUF_ADDR + slot * BUF_SIZE
        self.mem.write(buf_addr, frame)
        self._write_desc(TX_RING_ADDR, slot, buf_addr, len(frame), 0)
        self._tx_next = (slot + 1) % RING_LEN
        self._tx_outstanding += 1
        yield OpMmioWrite(bar=0, offset=REG_TX_TAIL,
                          data=self._tx_next.to_bytes(8, "little"))

    # --- workloads ------------------------------------------------------------------

    def _make_workload(self):
        if self.workload is None:
            return None
        kind = self.workload["kind"]
        if kind == "pingpong":
            if self.workload.get("initiator", False):
                return self._wl_pingpong_initiator()
            return self._wl_echo()
        if kind == "stream":
            if self.workload.get("role", "send") == "send":
                return self._wl_stream_sender()
            return self._wl_stream_receiver()
        raise HostError(f"unknown workload kind {kind!r}")

    def _wl_pingpong_initiator(self):
        count = self.workload.get("count", 100)
        frame_len = self.workload.get("frame_len", 64)
        dst = frames.parse_mac(self.workload["dst_mac"])
        timeout = self.workload.get("timeout_ns", DEFAULT_WORKLOAD_TIMEOUT_NS)
        for i in range(count):
            t0 = self.ctx.now
            yield from self._send_frame(dst, i, frame_len)
            while True:
                frame = yield OpWaitRx(timeout_ns=timeout)
                if frames.seq_of(frame) == i & 0xFFFF and frames.src_mac(frame) == dst:
                    break
            self.results.append(f"rtt_ns={self.ctx.now - t0}")

    def _wl_echo(self):
        while True:
            frame = yield OpWaitRx()
            yield from self._send_frame(frames.src_mac(frame), frames.seq_of(frame),
                                        len(frame))

    def _wl_stream_sender(self):
        rate = self.workload["rate_pps"]
        duration = self.workload["duration_ns"]
        frame_len = self.workload.get("frame_len", 64)
        dst = frames.parse_mac(self.workload["dst_mac"])
        if rate <= 0 or 1_000_000_000 % rate:
            raise HostError(f"stream rate {rate} pps has no integral period")
        period = 1_000_000_000 // rate
        sent = 0
        t = period
        while t <= duration:
            if t > self.ctx.now:
                yield OpSleep(t - self.ctx.now)
            yield from self._send_frame(dst, sent, frame_len)
            sent += 1
            t += period
        self.results.append(f"sent={sent}")

    def _wl_stream_receiver(self):
        delivered = 0
        while True:
            yield OpWaitRx()
            delivered += 1
            # Rewrite on every frame so the final count survives run end.
            if self.results and self.results[-1].startswith("delivered="):
                self.results.pop()
            self.results.append(f"delivered={delivered}")

    def finish(self) -> list[str]:
        return self.results
