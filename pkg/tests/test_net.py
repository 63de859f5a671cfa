from __future__ import annotations

import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from plcbench.errors import ConfigurationError, StartupError
from plcbench.net import RealRuntime, SimChannel


def test_zero_jitter_delivery_is_exact():
    ch = SimChannel(one_way_delay_us=1234)
    got = []
    a = ch.open(("a", 1))
    ch.open(("b", 1), lambda d, s: got.append((ch.runtime.now_us(), d, s)))
    ch.runtime.run_until(100)
    a.send(b"x", ("b", 1))
    ch.runtime.run_until(10_000)
    assert got == [(1334, b"x", ("a", 1))]


@given(st.integers(0, 2000), st.integers(0, 10**6), st.lists(st.integers(0, 500), min_size=1, max_size=30))
def test_fifo_per_direction_under_jitter(jitter, seed, gaps):
    ch = SimChannel(one_way_delay_us=1000, jitter_us=jitter, seed=seed)
    got = []
    a = ch.open(("a", 1))
    ch.open(("b", 1), lambda d, s: got.append(d))
    for k, gap in enumerate(gaps):
        ch.runtime.run_until(ch.runtime.now_us() + gap)
        a.send(bytes([k]), ("b", 1))
    ch.runtime.run_until(ch.runtime.now_us() + 10_000)
    assert got == [bytes([k]) for k in range(len(gaps))]


def test_overhead_applies_to_protocol_endpoints():
    ch = SimChannel(one_way_delay_us=1000, overhead_us={"fins": 300})
    got = []
    srv = ch.open(("plc", 9600), protocol="fins")
    ch.open(("pc", 1), lambda d, s: got.append(ch.runtime.now_us()))
    srv.send(b"r", ("pc", 1))
    ch.runtime.run_until(5000)
    assert got == [1300]


def test_ephemeral_ports_and_conflicts():
    ch = SimChannel()
    assert ch.open(("pc", 0)).address == ("pc", 49152)
    assert ch.open(("pc", 0)).address == ("pc", 49153)
    ch.open(("pc", 7))
    with pytest.raises(StartupError):
        ch.open(("pc", 7))
    with pytest.raises(ConfigurationError):
        SimChannel(one_way_delay_us=-1)


def test_wait_for_timeout_advances_clock():
    ch = SimChannel()
    assert not ch.runtime.wait_for(lambda: False, 5000)
    assert ch.runtime.now_us() == 5000


def test_real_runtime_round_trip():
    rt = RealRuntime(name="test-loop")
    try:
        got = []
        b = rt.open(("127.0.0.1", 0), lambda d, s: got.append(d))
        a = rt.open(("127.0.0.1", 0))
        a.send(b"ping", b.address)
        assert rt.wait_for(lambda: got == [b"ping"], 2_000_000)
        fired = threading.Event()
        rt.call_later(2000, fired.set)
        assert fired.wait(2.0)
        a.close()
        b.close()
    finally:
        rt.close()


def test_real_runtime_bind_failure():
    rt = RealRuntime()
    try:
        ep = rt.open(("127.0.0.1", 0))
        with pytest.raises(StartupError):
            rt.open(ep.address)
    finally:
        rt.close()
