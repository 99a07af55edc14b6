"""Raw Ethernet frame helpers shared by hosts and packet generators.

Workload frames are dst(6) + src(6) + ethertype(2) + seq(2) + zero pad;
the 2-byte sequence header is what ties echoes and sinks back to their
senders.
"""

from __future__ import annotations

import struct

ETHERTYPE_TEST = 0x88B5  # local experimental ethertype
BROADCAST = b"\xff" * 6
HEADER_LEN = 16  # dst + src + ethertype + seq


def parse_mac(text: str) -> bytes:
    parts = text.split(":")
    if len(parts) != 6:
        raise ValueError(f"bad MAC {text!r}")
    return bytes(int(p, 16) for p in parts)


def format_mac(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)


def is_group(mac: bytes) -> bool:
    """Broadcast/multicast: I/G bit of the first octet."""
    return bool(mac[0] & 1)


def build(dst: bytes, src: bytes, seq: int, frame_len: int) -> bytes:
    if frame_len < HEADER_LEN:
        raise ValueError(f"frame_len must be >= {HEADER_LEN}")
    hdr = dst + src + struct.pack(">HH", ETHERTYPE_TEST, seq & 0xFFFF)
    return hdr + bytes(frame_len - HEADER_LEN)


def dst_mac(frame: bytes) -> bytes:
    return frame[0:6]


def src_mac(frame: bytes) -> bytes:
    return frame[6:12]


def seq_of(frame: bytes) -> int:
    return struct.unpack_from(">H", frame, 14)[0]
