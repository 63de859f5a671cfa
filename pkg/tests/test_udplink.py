from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plcbench import udplink
from plcbench.errors import FormatError, ProtocolTimeout
from plcbench.lreal import bits_to_float, float_to_bits
from plcbench.udplink import QUERY_BITS, UdpClient

from helpers import SimBed


def test_encode_one_and_a_half():
    assert udplink.encode_value(1.5) == bytes.fromhex("3FF8000000000000")


def test_encode_negative_zero():
    assert udplink.encode_value(-0.0) == bytes.fromhex("8000000000000000")


@pytest.mark.parametrize("size", [0, 7, 9, 16])
def test_wrong_payload_length(size):
    with pytest.raises(FormatError):
        udplink.decode_bits(bytes(size))


def test_send_emits_one_datagram(bed):
    c = UdpClient(bed.channel, bed.plc.echo_address)
    c.send(1.5)
    assert bed.channel.sent == 1
    assert c.last_latency_us == 0


def test_recv_echo(bed):
    c = UdpClient(bed.channel, bed.plc.echo_address)
    c.send(2.0)
    assert c.recv() == 2.0


def test_recv_timeout(bed):
    c = UdpClient(bed.channel, bed.plc.echo_address)
    with pytest.raises(ProtocolTimeout):
        c.recv(timeout_us=10_000)
    assert bed.rt.now_us() == 10_000


def test_short_datagram_is_format_error(bed):
    c = UdpClient(bed.channel, bed.plc.echo_address)
    bed.channel.inject(bed.plc.echo_address, c.endpoint.address, bytes(7), 0)
    with pytest.raises(FormatError):
        c.recv()


def test_plc_ignores_wrong_sized_datagrams(bed):
    c = UdpClient(bed.channel, bed.plc.echo_address)
    c.endpoint.send(bytes(7), bed.plc.echo_address)
    reports = bed.plc.run(3000)
    assert sum(r.errors for r in reports) == 1
    with pytest.raises(ProtocolTimeout):
        c.recv(timeout_us=5000)


def test_cycle(bed):
    c = UdpClient(bed.channel, bed.plc.echo_address)
    assert c.cycle(8.25) == 8.25


def test_cycle_latency_bound_over_random_phases(bed):
    c = UdpClient(bed.channel, bed.plc.echo_address)
    rng = random.Random(2)
    for k in range(2000):
        bed.rt.sleep(rng.randrange(2000))
        c.cycle(float(k))
        assert 3000 <= c.last_latency_us <= 4000


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**64 - 1).filter(lambda b: b != QUERY_BITS))
def test_echo_identity(bits):
    b = SimBed()
    c = UdpClient(b.channel, b.plc.echo_address)
    assert float_to_bits(c.cycle(bits_to_float(bits))) == bits


def test_cycle_has_one_datagram_outstanding(bed):
    c = UdpClient(bed.channel, bed.plc.echo_address)
    for k in range(10):
        before = bed.channel.sent
        c.cycle(float(k))
        # one from the client, one echo back
        assert bed.channel.sent - before == 2


def test_query_cannot_be_cycled(bed):
    c = UdpClient(bed.channel, bed.plc.echo_address)
    with pytest.raises(ValueError):
        c.cycle(bits_to_float(QUERY_BITS))


def test_read_returns_output_variable(bed):
    bed.plc.write_variable("CIn", 3.5)
    bed.rt.sleep(1000)
    c = UdpClient(bed.channel, bed.plc.echo_address)
    assert c.read() == 3.5
    assert bed.plc.read_variable("CIn") == 3.5


def test_write_confirms_and_lands_in_plc(bed):
    c = UdpClient(bed.channel, bed.plc.echo_address)
    c.write(6.5)
    assert bed.plc.read_variable("CIn") == 6.5
    assert c.last_latency_us >= 3000
