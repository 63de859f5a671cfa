from __future__ import annotations

import math
import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plcbench import fins
from plcbench.errors import DecodeError, EncodeError, ProtocolTimeout, RemoteError
from plcbench.fins import (
    AREA_DM,
    FinsClient,
    FinsHeader,
    FinsRequest,
    FinsResponse,
    MemoryAreaRead,
    MemoryAreaWrite,
    SidAllocator,
    decode_frame,
    encode_frame,
)
from plcbench.lreal import bits_to_float, float_to_bits

from helpers import SimBed

u8 = st.integers(0, 0xFF)
u16 = st.integers(0, 0xFFFF)


@st.composite
def headers(draw, response: bool):
    icf = draw(u8)
    icf = icf | fins.ICF_RESPONSE_BIT if response else icf & ~fins.ICF_RESPONSE_BIT
    return FinsHeader(icf, *(draw(u8) for _ in range(9)))


@st.composite
def frames(draw):
    if draw(st.booleans()):
        h = draw(headers(response=False))
        area, addr = draw(u8), draw(u16)
        if draw(st.booleans()):
            return FinsRequest(h, MemoryAreaRead(area, addr, 0, draw(st.integers(1, 0xFFFF))))
        words = tuple(draw(st.lists(u16, min_size=1, max_size=64)))
        return FinsRequest(h, MemoryAreaWrite(area, addr, 0, len(words), words))
    h = draw(headers(response=True))
    code = draw(st.sampled_from(fins.SUPPORTED_COMMANDS))
    end = draw(u16)
    payload = ()
    if end == fins.END_OK and code == fins.MEMORY_AREA_READ:
        payload = tuple(draw(st.lists(u16, max_size=64)))
    return FinsResponse(h, code, end, payload)


# -- codec ------------------------------------------------------------------


def test_read_request_layout():
    frame = FinsRequest(FinsHeader(sid=1), MemoryAreaRead(0x82, 0, 0, 4))
    data = encode_frame(frame)
    assert len(data) == 18
    assert data[:10] == bytes([0x80, 0, 0x02, 0, 1, 0, 0, 2, 0, 1])
    assert data[10:12] == b"\x01\x01"
    assert data[-6:] == bytes([0x82, 0x00, 0x00, 0x00, 0x00, 0x04])


def test_empty_ok_response_is_14_bytes():
    resp = FinsResponse(FinsHeader(sid=1).reply(), fins.MEMORY_AREA_WRITE, fins.END_OK)
    assert len(encode_frame(resp)) == 14


def test_write_word_count_mismatch_is_encode_error():
    with pytest.raises(EncodeError):
        encode_frame(FinsRequest(FinsHeader(), MemoryAreaWrite(AREA_DM, 0, 0, 2, (1, 2, 3))))


def test_nine_bytes_is_truncated_header():
    with pytest.raises(DecodeError) as info:
        decode_frame(bytes(9))
    assert info.value.kind == "truncated header"
    assert info.value.offset == 9


def test_unknown_command_code():
    data = FinsHeader().pack() + b"\x01\x99" + bytes(6)
    with pytest.raises(DecodeError) as info:
        decode_frame(data)
    assert info.value.kind == "unsupported command"
    assert info.value.offset == 10


def test_trailing_bytes_rejected():
    data = encode_frame(FinsRequest(FinsHeader(), MemoryAreaRead(AREA_DM, 0, 0, 4))) + b"\x00"
    with pytest.raises(DecodeError, match="trailing bytes"):
        decode_frame(data)


def test_reply_header_swaps_addresses_and_keeps_sid():
    h = FinsHeader(dna=1, da1=2, da2=3, sna=4, sa1=5, sa2=6, sid=77)
    r = h.reply()
    assert r.is_response and r.sid == 77
    assert (r.dna, r.da1, r.da2, r.sna, r.sa1, r.sa2) == (4, 5, 6, 1, 2, 3)


@settings(max_examples=500)
@given(frames())
def test_round_trip(frame):
    assert decode_frame(encode_frame(frame)) == frame


@settings(max_examples=500)
@given(frames(), st.randoms(use_true_random=False))
def test_mutations_decode_or_raise_classified_error(frame, rnd):
    data = bytearray(encode_frame(frame))
    op = rnd.randrange(3)
    if op == 0 and data:
        del data[rnd.randrange(len(data)) :]
    elif op == 1:
        data += bytes(rnd.randrange(256) for _ in range(rnd.randint(1, 4)))
    else:
        data[rnd.randrange(len(data))] ^= 1 << rnd.randrange(8)
    try:
        out = decode_frame(bytes(data))
    except DecodeError as exc:
        assert exc.kind and 0 <= exc.offset <= len(data)
    else:
        assert encode_frame(out) == bytes(data)


def test_sid_allocator_skips_zero_and_wraps():
    alloc = SidAllocator()
    sids = [alloc.allocate(lambda s: False) for _ in range(600)]
    assert 0 not in sids
    assert sids[:3] == [1, 2, 3]
    assert sids[254:257] == [255, 1, 2]


def test_sid_allocator_skips_busy_sids():
    alloc = SidAllocator()
    assert alloc.allocate(lambda s: s in (1, 2)) == 3
    with pytest.raises(RuntimeError):
        alloc.allocate(lambda s: True)


# -- client against the emulator -------------------------------------------


def test_fresh_read_is_zero(bed):
    assert FinsClient(bed.channel, bed.plc.fins_address).read(4) == 0.0


@pytest.mark.parametrize("value", [7.5, 3.25])
def test_write_scan_read(bed, value):
    c = FinsClient(bed.channel, bed.plc.fins_address)
    c.write(0, value)
    bed.rt.sleep(1000)
    assert c.read(4) == value


def test_read_latency_within_two_to_three_ms(bed):
    c = FinsClient(bed.channel, bed.plc.fins_address)
    rng = random.Random(1)
    for _ in range(200):
        bed.rt.sleep(rng.randrange(3000))
        c.read(4)
        assert 2000 <= c.last_latency_us <= 3000


def test_write_to_unmapped_address(bed):
    c = FinsClient(bed.channel, bed.plc.fins_address)
    with pytest.raises(RemoteError) as info:
        c.write(100, 1.0)
    assert info.value.code == fins.END_ADDRESS_RANGE


def test_other_memory_area_rejected(bed):
    c = FinsClient(bed.channel, bed.plc.fins_address)
    with pytest.raises(RemoteError) as info:
        c.read_words(0, 4, area=0xB0)
    assert info.value.code == fins.END_AREA_MISSING


def test_nan_survives_write_then_read(bed):
    c = FinsClient(bed.channel, bed.plc.fins_address)
    c.write(0, math.nan)
    bed.rt.sleep(1000)
    assert math.isnan(c.read(4))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**64 - 1))
def test_float_fidelity_through_dm_image(bits):
    b = SimBed()
    c = FinsClient(b.channel, b.plc.fins_address)
    value = bits_to_float(bits)
    assert float_to_bits(c.cycle_pipelined(0, 4, value)) == bits


def test_pipelined_cycle_returns_value(bed):
    c = FinsClient(bed.channel, bed.plc.fins_address)
    assert c.cycle_pipelined(0, 4, 9.0) == 9.0


def test_pipelined_beats_sync(bed):
    c = FinsClient(bed.channel, bed.plc.fins_address)
    c.write(0, 1.0)
    w = c.last_latency_us
    c.read(4)
    r = c.last_latency_us
    c.cycle_pipelined(0, 4, 2.0)
    assert c.last_latency_us < w + r


def test_timeout_when_nobody_answers(bed):
    c = FinsClient(bed.channel, ("plc", 1), timeout_us=10_000)
    with pytest.raises(ProtocolTimeout):
        c.read(0)
    assert bed.rt.now_us() == 10_000


def test_responses_matched_by_sid_not_arrival_order(bed):
    """A fake server answers a batch of reads in reverse order."""
    ch = bed.channel
    pending = []

    def server(data, src):
        pending.append((decode_frame(data), src))

    srv = ch.open(("fake", 9600), server)
    c = FinsClient(ch, ("fake", 9600))
    sids = [c.submit(MemoryAreaRead(AREA_DM, k, 0, 1)) for k in range(8)]
    ch.runtime.run_until(ch.runtime.now_us() + 1000)
    assert len(pending) == 8
    for req, src in reversed(pending):
        # payload carries the requested address so the match is checkable
        resp = FinsResponse(req.header.reply(), fins.MEMORY_AREA_READ, 0, (req.command.address,))
        srv.send(encode_frame(resp), src)
    for k, sid in enumerate(sids):
        assert c.collect(sid).payload == (k,)
    assert c.unmatched == 0


def test_stray_response_is_counted_not_matched(bed):
    ch = bed.channel
    c = FinsClient(ch, bed.plc.fins_address)
    stray = FinsResponse(FinsHeader(sid=200).reply(), fins.MEMORY_AREA_READ, 0, (1, 2, 3, 4))
    ch.inject(("plc", 9600), c.endpoint.address, encode_frame(stray), 0)
    assert c.read(4) == 0.0
    assert c.unmatched == 1


def test_odd_payload_classified():
    data = encode_frame(FinsResponse(FinsHeader().reply(), fins.MEMORY_AREA_READ, 0, (1,))) + b"\x00"
    with pytest.raises(DecodeError) as info:
        decode_frame(data)
    assert info.value.kind == "odd payload length"


def test_word_helpers_round_trip():
    assert fins.float_words(1.5) == (0x3FF8, 0, 0, 0)
    assert fins.words_float(struct.unpack(">4H", struct.pack(">d", -2.5))) == -2.5
