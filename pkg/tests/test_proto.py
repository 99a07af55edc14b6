"""Slot-encoding tests.

`oracle_encode` is an independent byte-level encoder built only from the
documented layout (LE u64 timestamp, LE u32 payload length, payload,
type in the final byte); expected blocks for the layout cases are
computed with it, never with the implementation under test.
"""

import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netrig import proto
from netrig.proto import (
    Bar,
    ChannelParams,
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
    MsgType,
    OversizedMessage,
    Packet,
    Sync,
    TruncatedPayload,
    UnknownType,
    WireMessage,
    decode,
    encode,
)


def oracle_encode(timestamp: int, msg_type: int, payload: bytes, slot_size: int) -> bytes:
    """Independent reference for the slot layout."""
    assert len(payload) <= slot_size - 13
    block = bytearray(slot_size)
    block[0:8] = timestamp.to_bytes(8, "little")
    block[8:12] = len(payload).to_bytes(4, "little")
    block[12 : 12 + len(payload)] = payload
    block[slot_size - 1] = msg_type & 0x7F
    return bytes(block)


def test_sync_layout_matches_oracle():
    got = encode(WireMessage(500, Sync()), 4096)
    assert got == oracle_encode(500, int(MsgType.SYNC), b"", 4096)
    assert got[0:8] == (500).to_bytes(8, "little")
    assert struct.unpack_from("<I", got, 8)[0] == 0
    assert got[-1] == int(MsgType.SYNC)


def test_packet_length_field_matches_oracle():
    # 60 data bytes behind a 2-byte length prefix: payload length field 62.
    data = bytes(60)
    got = encode(WireMessage(1500, Packet(data=data)), 4096)
    expect = oracle_encode(
        1500, int(MsgType.PACKET), (60).to_bytes(2, "little") + data, 4096
    )
    assert got == expect
    assert struct.unpack_from("<I", got, 8)[0] == 62


def test_mmio_write_round_trip():
    m = WireMessage(2000, MmioWrite(req_id=7, bar=0, offset=0x18, data=bytes(8)))
    assert decode(encode(m, 4096)) == m


def test_owner_bit_never_set_by_encode():
    for body in (Sync(), Packet(data=bytes(64)), DmaRead(req_id=1, addr=2, length=3)):
        block = encode(WireMessage(12345, body), 256)
        assert not block[-1] & 0x80


def test_unknown_type_rejected():
    block = bytearray(oracle_encode(1, 0x7F, b"", 256))
    with pytest.raises(UnknownType):
        decode(bytes(block))


def test_truncated_payload_rejected():
    # Declared payload length exceeding the slot capacity.
    block = bytearray(oracle_encode(1, int(MsgType.PACKET), b"", 256))
    block[8:12] = (300).to_bytes(4, "little")
    with pytest.raises(TruncatedPayload):
        decode(bytes(block))
    # Inner packet length larger than the carried bytes.
    inner = (200).to_bytes(2, "little") + bytes(20)
    with pytest.raises(TruncatedPayload):
        decode(oracle_encode(1, int(MsgType.PACKET), inner, 256))


def test_oversized_message_rejected():
    with pytest.raises(OversizedMessage):
        encode(WireMessage(1, Packet(data=bytes(250))), 256)


def test_decode_masks_owner_bit():
    block = bytearray(encode(WireMessage(7, Sync()), 256))
    block[-1] |= 0x80
    assert decode(bytes(block)) == WireMessage(7, Sync())


_bars = st.lists(
    st.builds(Bar, size=st.sampled_from([0, 4096, 65536, 2**20]), dummy=st.booleans()),
    max_size=6,
).map(tuple)

_intro = st.builds(
    DeviceIntro,
    vendor_id=st.integers(0, 0xFFFF),
    device_id=st.integers(0, 0xFFFF),
    pci_class=st.integers(0, 0xFF),
    pci_subclass=st.integers(0, 0xFF),
    pci_revision=st.integers(0, 0xFF),
    bars=_bars,
    num_msi_vectors=st.integers(0, 0xFFFF),
    num_msix_vectors=st.integers(0, 0xFFFF),
    msix_table_bar=st.integers(0, 5),
    msix_table_offset=st.integers(0, 2**32),
    msix_pba_bar=st.integers(0, 5),
    msix_pba_offset=st.integers(0, 2**32),
)

_u64 = st.integers(0, 2**64 - 1)
_small_bytes = st.binary(min_size=1, max_size=512)
_mmio_data = st.sampled_from([1, 2, 4, 8]).flatmap(
    lambda n: st.binary(min_size=n, max_size=n)
)

_bodies = st.one_of(
    st.just(Sync()),
    st.builds(InitDev, intro=_intro),
    st.builds(DmaRead, req_id=_u64, addr=_u64, length=st.integers(1, 2**32 - 1)),
    st.builds(DmaWrite, req_id=_u64, addr=_u64, data=_small_bytes),
    st.builds(MmioCompl, req_id=_u64, data=st.none() | _mmio_data),
    st.builds(DmaCompl, req_id=_u64, data=st.none() | _small_bytes),
    st.builds(Interrupt, kind=st.sampled_from(list(IrqKind)), vector=st.integers(0, 2**32 - 1)),
    st.builds(MmioRead, req_id=_u64, bar=st.integers(0, 5), offset=_u64,
              length=st.sampled_from([1, 2, 4, 8])),
    st.builds(MmioWrite, req_id=_u64, bar=st.integers(0, 5), offset=_u64, data=_mmio_data),
    st.builds(IntStatus, legacy_enabled=st.booleans(), msi_enabled=st.booleans(),
              msix_enabled=st.booleans()),
    st.builds(Packet, data=st.binary(min_size=14, max_size=1500)),
)


@settings(max_examples=300, deadline=None)
@given(body=_bodies, timestamp=_u64)
def test_round_trip_property(body, timestamp):
    m = WireMessage(timestamp, body)
    block = encode(m, 4096)
    assert decode(block) == m
    # Bit-stable: independent encodes of equal messages are identical.
    assert encode(WireMessage(timestamp, body), 4096) == block


def test_channel_params_invariants():
    p = ChannelParams(link_latency_ns=500)
    assert p.sync_interval_ns == 500  # delta defaults to the link latency
    with pytest.raises(ValueError):
        ChannelParams(link_latency_ns=0)
    with pytest.raises(ValueError):
        ChannelParams(link_latency_ns=500, sync_interval_ns=600)
    with pytest.raises(ValueError):
        ChannelParams(link_latency_ns=500, sync_interval_ns=0)
    with pytest.raises(ValueError):
        ChannelParams(slot_size_bytes=100)
    with pytest.raises(ValueError):
        ChannelParams(slot_size_bytes=130)
    with pytest.raises(ValueError):
        ChannelParams(queue_len_slots=1)
    ChannelParams(link_latency_ns=500, sync_interval_ns=100)  # delta < latency is legal


def test_field_invariants():
    with pytest.raises(ValueError):
        Packet(data=bytes(13))
    with pytest.raises(ValueError):
        MmioWrite(req_id=1, bar=0, offset=0, data=bytes(3))
    with pytest.raises(ValueError):
        MmioRead(req_id=1, bar=0, offset=0, length=16)
    with pytest.raises(ValueError):
        Bar(size=100)
    with pytest.raises(ValueError):
        DmaWrite(req_id=1, addr=0, data=b"")
