from __future__ import annotations

import socket

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plcbench import fins, udplink
from plcbench.errors import ConfigurationError, StartupError, UnsupportedModeError
from plcbench.fins import FinsClient
from plcbench.lreal import bits_to_words, float_to_bits, words_to_bits
from plcbench.net import SimChannel
from plcbench.plcsim import (
    Loopback,
    Ports,
    Publish,
    ScanConfig,
    Simulated,
    Variable,
    VariableTable,
    create_emulator,
    standard_scan,
    standard_variables,
)
from plcbench.plcsim.variables import AddressError

bits64 = st.integers(min_value=0, max_value=2**64 - 1)


# -- variable table ---------------------------------------------------------


def test_fresh_emulator_is_zeroed(bed):
    assert bed.plc.read_variable("CIn") == 0.0
    assert bed.plc.read_variable("COut") == 0.0
    assert bed.plc.scan.copy_rules == [("CIn", "COut")]
    assert bed.plc.scan.task_period_us == 1000


def test_overlapping_dm_ranges_rejected():
    with pytest.raises(ConfigurationError, match="overlaps"):
        create_emulator([Variable("CIn", Publish.INPUT, 0), Variable("COut", Publish.OUTPUT, 2)])


def test_duplicate_names_rejected():
    with pytest.raises(ConfigurationError, match="duplicate"):
        VariableTable([Variable("A", dm_address=0), Variable("A", dm_address=8)])


def test_copy_rule_must_name_existing_variables():
    with pytest.raises(ConfigurationError, match="unknown variable"):
        create_emulator(standard_variables(), ScanConfig(1000, [("CIn", "Nope")]))


def test_nonpositive_task_period_rejected():
    with pytest.raises(ConfigurationError):
        create_emulator(standard_variables(), ScanConfig(0))


@given(bits64)
def test_word_image_is_big_endian_msw_first(bits):
    table = VariableTable(standard_variables())
    table.set_bits("CIn", bits)
    words = table.read_words(0, 4)
    assert words == [(bits >> s) & 0xFFFF for s in (48, 32, 16, 0)]
    assert words_to_bits(words) == bits
    table.write_words(4, words)
    assert table.get_bits("COut") == bits


def test_word_write_outside_map_changes_nothing():
    table = VariableTable(standard_variables())
    table.set("COut", 1.0)
    with pytest.raises(AddressError):
        table.write_words(6, [1, 2, 3, 4])  # DM6..9, DM8 unmapped
    assert table.get("COut") == 1.0


def test_lreal_word_helpers_known_value():
    assert bits_to_words(float_to_bits(1.5)) == [0x3FF8, 0, 0, 0]


# -- scan semantics ---------------------------------------------------------


def test_scan_copies_cin_to_cout(bed):
    bed.plc.write_variable("CIn", 7.5)
    bed.plc.scan_step()
    assert bed.plc.read_variable("COut") == 7.5


def test_idle_scan_reports_nothing(bed):
    report = bed.plc.scan_step()
    assert report.processed == 0 and report.emitted == 0
    assert bed.plc.read_variable("CIn") == bed.plc.read_variable("COut") == 0.0


@settings(max_examples=300)
@given(st.lists(bits64, min_size=1, max_size=20))
def test_copy_invariant_single_stepped(values):
    plc = create_emulator(standard_variables(), standard_scan(), autostart=False)
    for bits in values:
        plc.table.set_bits("CIn", bits)
        plc.scan_step()
        assert plc.table.get_bits("COut") == bits


def test_write_then_read_same_scan_sees_written_value(bed):
    client = FinsClient(bed.channel, bed.plc.fins_address)
    wsid = client.submit(fins.MemoryAreaWrite(fins.AREA_DM, 0, 0, 4, fins.float_words(3.0)))
    rsid = client.submit(fins.MemoryAreaRead(fins.AREA_DM, 4, 0, 4))
    reports = []
    bed.plc.add_listener(reports.append)
    assert fins.words_float(client.collect(rsid).payload) == 3.0
    assert client.collect(wsid).end_code == fins.END_OK
    assert [r.fins for r in reports if r.fins] == [2]


def test_read_queued_before_write_is_answered_first(bed):
    client = FinsClient(bed.channel, bed.plc.fins_address)
    order = []
    deliver = client.endpoint.handler

    def spy(data, src):
        order.append(fins.decode_frame(data).command_code)
        deliver(data, src)

    client.endpoint.handler = spy
    rsid = client.submit(fins.MemoryAreaRead(fins.AREA_DM, 4, 0, 4))
    wsid = client.submit(fins.MemoryAreaWrite(fins.AREA_DM, 0, 0, 4, fins.float_words(3.0)))
    assert fins.words_float(client.collect(rsid).payload) == 0.0
    assert client.collect(wsid).end_code == fins.END_OK
    assert order == [fins.MEMORY_AREA_READ, fins.MEMORY_AREA_WRITE]
    bed.rt.sleep(1000)
    assert bed.plc.read_variable("COut") == 3.0


def test_malformed_fins_frame_gets_error_reply(bed):
    got = []
    ep = bed.channel.open(("pc", 0), lambda d, s: got.append(d))
    bad = fins.FinsHeader(sid=9).pack() + bytes([0x01, 0x99])
    ep.send(bad, bed.plc.fins_address)
    reports = bed.plc.run(3000)
    assert sum(r.errors for r in reports) == 1
    reply = got[0]
    assert reply[0] & fins.ICF_RESPONSE_BIT and reply[9] == 9
    assert int.from_bytes(reply[12:14], "big") == fins.END_UNDEFINED_COMMAND


# -- running ----------------------------------------------------------------


def test_run_10ms_is_10_scans(bed):
    assert len(bed.plc.run(10_000)) == 10
    assert bed.plc.sim_now() == 10_000


def test_run_zero_is_no_scans(bed):
    bed.plc.write_variable("CIn", 1.0)
    assert bed.plc.run(0) == []
    assert bed.plc.read_variable("COut") == 0.0


def test_run_until_five_fins_requests_served(bed):
    client = FinsClient(bed.channel, bed.plc.fins_address)
    for _ in range(5):
        client.submit(fins.MemoryAreaRead(fins.AREA_DM, 0, 0, 4))
    reports = bed.plc.run(until_served=5, protocol="fins")
    assert sum(r.fins for r in reports) == 5


def test_sim_now_starts_at_zero_and_is_monotone(bed):
    assert bed.plc.sim_now() == 0
    a = bed.plc.sim_now()
    bed.plc.run(2500)
    assert bed.plc.sim_now() >= a


def test_sim_now_unsupported_in_loopback():
    with create_emulator(standard_variables(), mode=Loopback("127.0.0.1", Ports(0, 0, 0))) as plc:
        with pytest.raises(UnsupportedModeError):
            plc.sim_now()


def test_port_in_use_is_a_startup_error():
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind(("127.0.0.1", 0))
    try:
        port = sock.getsockname()[1]
        with pytest.raises(StartupError):
            create_emulator(standard_variables(), mode=Loopback("127.0.0.1", Ports(port, 0, 0)))
    finally:
        sock.close()


def test_identical_schedules_give_identical_reports():
    def trace():
        ch = SimChannel(one_way_delay_us=700, jitter_us=300, seed=5)
        plc = create_emulator(standard_variables(), standard_scan(), Simulated(ch))
        reports = []
        plc.add_listener(reports.append)
        client = FinsClient(ch, plc.fins_address)
        for k in range(20):
            client.cycle_pipelined(0, 4, float(k))
        return reports

    assert trace() == trace()


def test_verbose_scan_log_line(bed, caplog):
    bed.plc.verbose = True
    with caplog.at_level("INFO"):
        bed.plc.run(1000)
    assert "scan=0 t_us=1000" in caplog.text


# -- echo rungs -------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=50_000), st.integers(min_value=1, max_value=5))
def test_echo_departs_one_to_two_scans_after_arrival(arrival, period_ms):
    period = 1000 * period_ms
    ch = SimChannel(one_way_delay_us=0)
    plc = create_emulator(standard_variables(), standard_scan(period), Simulated(ch))
    departures = []
    ch.open(("pc", 5000), lambda d, s: departures.append(ch.runtime.now_us()))
    ch.inject(("pc", 5000), plc.echo_address, udplink.encode_value(2.0), arrival)
    ch.runtime.run_until(arrival + 3 * period)
    assert len(departures) == 1
    assert period <= departures[0] - arrival <= 2 * period


def test_echo_stores_received_value_in_input(bed):
    ch = bed.channel
    ch.open(("pc", 5000), lambda d, s: None)
    ch.inject(("pc", 5000), bed.plc.echo_address, udplink.encode_value(4.25), 0)
    bed.plc.run(3000)
    assert bed.plc.read_variable("CIn") == 4.25
    assert bed.plc.read_variable("COut") == 4.25
