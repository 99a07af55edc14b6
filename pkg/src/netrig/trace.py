"""Canonical event-trace emission and normalization.

Every component writes one trace file; byte equality of the canonical
form is the run-equivalence relation used by the accuracy, determinism
and proxy-transparency checks. One record per line:

    t=<ns> c=<comp> ch=<chan> d=<tx|rx|local> ty=<type> dg=<hex16> sq=<n>

SYNC records are written only when sync tracing is enabled and are
filtered from the canonical form by default; they keep a sequence
counter separate from data/local records so that enabling them never
shifts canonical sq values.
"""

from __future__ import annotations

import io
import os
import time
from dataclasses import dataclass

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF

_FLUSH_EVERY_RECORDS = 4096
_FLUSH_EVERY_WALL_S = 1.0


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a; stable across processes and machines."""
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _U64
    return h


@dataclass(frozen=True)
class TraceRecord:
    sim_time_ns: int
    component_id: str
    channel_id: str
    direction: str  # tx | rx | local
    msg_type: str
    digest: int
    seq: int

    def line(self) -> str:
        return (
            f"t={self.sim_time_ns} c={self.component_id} ch={self.channel_id} "
            f"d={self.direction} ty={self.msg_type} dg={self.digest:016x} sq={self.seq}"
        )


class Tracer:
    """Buffered per-component trace writer.

    Tracing must never feed back into simulation behavior: it costs
    wall-clock only and is flushed at exit and periodically so the
    orchestrator's watchdog can observe progress.
    """

    def __init__(self, component_id: str, path: str | None, sync_records: bool = False,
                 dump_payloads: bool = False):
        self.component_id = component_id
        self.sync_records = sync_records
        # Debug aid: append the raw payload as hex. Extra fields are
        # ignored by parse_line and stripped by canonicalize.
        self.dump_payloads = dump_payloads
        self._seq = 0
        self._sync_seq = 0
        self._buf: list[str] = []
        self._path = path
        self._out: io.TextIOBase | None = None
        self._records_since_flush = 0
        self._last_flush = time.monotonic()
        if path is not None:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            self._out = open(path, "w", encoding="ascii")

    def emit(self, sim_time_ns: int, channel_id: str, direction: str,
             msg_type: str, payload: bytes = b"") -> None:
        if msg_type == "SYNC":
            if not self.sync_records:
                return
            seq = self._sync_seq
            self._sync_seq += 1
        else:
            seq = self._seq
            self._seq += 1
        rec = TraceRecord(
            sim_time_ns=sim_time_ns,
            component_id=self.component_id,
            channel_id=channel_id,
            direction=direction,
            msg_type=msg_type,
            digest=fnv1a64(payload),
            seq=seq,
        )
        if self._out is not None:
            line = rec.line()
            if self.dump_payloads:
                line += f" pl={payload.hex()}"
            self._buf.append(line)
            self._records_since_flush += 1
            if (
                self._records_since_flush >= _FLUSH_EVERY_RECORDS
                or time.monotonic() - self._last_flush > _FLUSH_EVERY_WALL_S
            ):
                self.flush()

    def flush(self) -> None:
        if self._out is not None and self._buf:
            self._out.write("\n".join(self._buf) + "\n")
            self._out.flush()
            self._buf.clear()
        self._records_since_flush = 0
        self._last_flush = time.monotonic()

    def close(self) -> None:
        self.flush()
        if self._out is not None:
            self._out.close()
            self._out = None


def parse_line(line: str) -> TraceRecord:
    fields = dict(part.split("=", 1) for part in line.split())
    return TraceRecord(
        sim_time_ns=int(fields["t"]),
        component_id=fields["c"],
        channel_id=fields["ch"],
        direction=fields["d"],
        msg_type=fields["ty"],
        digest=int(fields["dg"], 16),
        seq=int(fields["sq"]),
    )


def canonicalize(lines, include_sync: bool = False) -> str:
    """Normalize raw trace text: stable field order, fixed decimal
    formatting, SYNC records filtered unless ``include_sync``.

    Idempotent: canonicalize(canonicalize(x)) == canonicalize(x).
    """
    if isinstance(lines, str):
        lines = lines.splitlines()
    out = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        rec = parse_line(line)
        if rec.msg_type == "SYNC" and not include_sync:
            continue
        out.append(rec.line())
    return "\n".join(out) + ("\n" if out else "")


def canonicalize_file(path: str, include_sync: bool = False) -> str:
    with open(path, "r", encoding="ascii") as f:
        return canonicalize(f.read(), include_sync=include_sync)
