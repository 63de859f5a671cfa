"""Scan-cycle PLC emulator serving FINS, CIP-lite and a raw UDP echo.

Every scan runs six phases in a fixed order:

1. drain datagrams that arrived since the last scan into per-endpoint queues
2. apply queued writes (FINS 0x0102, CIP write, link data) in arrival order
3. execute the copy rules
4. answer queued reads against the post-copy state
5. advance the two alternating UDP echo rungs
6. publish producer tags whose RPI has elapsed

Within a request queue a write that arrived *after* a read is held back to
the next scan, so effects and responses always follow arrival order.
"""

from __future__ import annotations

import logging
from collections import deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

from .. import ciplite, fins, udplink
from ..ciplite import ConsumerCell, Direction, LinkMessage, ProducerState, TagLink
from ..errors import ConfigurationError, DecodeError, UnsupportedModeError
from ..net import Address, RealRuntime, SimChannel
from .variables import AddressError, Publish, Variable, VariableTable

log = logging.getLogger(__name__)


@dataclass
class ScanConfig:
    task_period_us: int = 1000
    copy_rules: Sequence[tuple[str, str]] = (("CIn", "COut"),)


@dataclass(frozen=True)
class Ports:
    fins: int = 9600
    cip: int = ciplite.DEFAULT_PORT
    echo: int = udplink.DEFAULT_PORT


@dataclass(frozen=True)
class Simulated:
    channel: SimChannel
    host: str = "plc"
    ports: Ports = Ports()


@dataclass(frozen=True)
class Loopback:
    host: str = "127.0.0.1"
    ports: Ports = Ports()


@dataclass(frozen=True)
class ScanReport:
    index: int
    time_us: int
    fins: int = 0
    cip: int = 0
    links: int = 0
    udp_received: int = 0
    udp_sent: int = 0
    produced: int = 0
    errors: int = 0
    emitted: int = 0

    @property
    def processed(self) -> int:
        return self.fins + self.cip + self.links + self.udp_received

    def log_line(self) -> str:
        return (
            f"scan={self.index} t_us={self.time_us} fins={self.fins} cip={self.cip} "
            f"links={self.links} udp_rx={self.udp_received} udp_tx={self.udp_sent} "
            f"produced={self.produced} errors={self.errors} emitted={self.emitted}"
        )


@dataclass
class _Rung:
    pending: tuple[int, Address] | None = None
    received_scan: int = -1


@dataclass
class EchoRungs:
    """Two receive/send rungs that take turns, one per scan.

    The active rung picks up one datagram; whichever rung holds a datagram
    from an earlier scan sends it back. A datagram picked up on scan k
    therefore leaves on scan k+1. A received value is also stored in the
    source variable of the first copy rule; the query pattern is answered
    with that rule's destination variable instead of being echoed.
    """

    rungs: list[_Rung] = field(default_factory=lambda: [_Rung(), _Rung()])
    active: int = 0


@dataclass
class _Counts:
    fins: int = 0
    cip: int = 0
    links: int = 0
    udp_received: int = 0
    udp_sent: int = 0
    produced: int = 0
    errors: int = 0
    emitted: int = 0


_WRITE, _READ = "w", "r"


class Emulator:
    """A PLC with one variable table, driven scan by scan.

    Create through :func:`create_emulator`.
    """

    def __init__(self, table: VariableTable, scan: ScanConfig, mode: Simulated | Loopback, *, autostart: bool = True) -> None:
        self.table = table
        self.scan = scan
        self.mode = mode
        if isinstance(mode, Simulated):
            self.net = mode.channel
            self.runtime = mode.channel.runtime
            self._owns_runtime = False
        else:
            self.runtime = RealRuntime(name="plc-scan")
            self.net = self.runtime
            self._owns_runtime = True
        self._inbox: dict[str, deque] = {"fins": deque(), "cip": deque(), "udp": deque()}
        self._timer = None
        self.closed = False
        ports = mode.ports
        try:
            self._fins_ep = self.net.open((mode.host, ports.fins), self._queue_inbox("fins"), protocol="fins")
            self._cip_ep = self.net.open((mode.host, ports.cip), self._queue_inbox("cip"), protocol="cip")
            self._echo_ep = self.net.open((mode.host, ports.echo), self._queue_inbox("udp"), protocol="udp")
        except Exception:
            self.close()
            raise
        self._fins_q: deque = deque()
        self._cip_q: deque = deque()
        self._link_q: deque = deque()
        self._echo_q: deque = deque()
        self.echo = EchoRungs()
        self._producers: dict[int, ProducerState] = {}
        self._consumers: dict[int, tuple[ConsumerCell, str]] = {}
        self.scan_count = 0
        self.verbose = False
        self._listeners: list = []
        self._next_scan_us: int | None = None
        if autostart:
            self.start()

    def _queue_inbox(self, name: str):
        def handler(data: bytes, src: Address) -> None:
            self._inbox[name].append((data, src))

        return handler

    # -- addresses ----------------------------------------------------------

    @property
    def fins_address(self) -> Address:
        return self._fins_ep.address

    @property
    def cip_address(self) -> Address:
        return self._cip_ep.address

    @property
    def echo_address(self) -> Address:
        return self._echo_ep.address

    # -- scheduling ---------------------------------------------------------

    def start(self) -> None:
        """Begin periodic scans, the first one task_period from now."""
        if self._timer is not None:
            return
        self._next_scan_us = self.runtime.now_us() + self.scan.task_period_us
        self._timer = self.runtime.call_at(self._next_scan_us, self._tick)

    def stop(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None

    def _tick(self) -> None:
        self.scan_step()
        period = self.scan.task_period_us
        nxt = self._next_scan_us + period
        now = self.runtime.now_us()
        if nxt < now - period:
            # fell behind by more than a period (loopback only): skip ahead
            nxt += ((now - nxt) // period + 1) * period
        self._next_scan_us = nxt
        self._timer = self.runtime.call_at(nxt, self._tick)

    def sim_now(self) -> int:
        if not isinstance(self.mode, Simulated):
            raise UnsupportedModeError("sim_now is only available in simulated mode")
        return self.runtime.now_us()

    def run(self, duration_us: int | None = None, *, until_served: int | None = None, protocol: str | None = None,
            limit_us: int = 60_000_000) -> list[ScanReport]:
        """Let scans run for a duration, or until enough requests were served.

        ``protocol`` restricts ``until_served`` to one of "fins", "cip",
        "links" or "udp". Returns the reports of the scans that ran.
        """
        reports: list[ScanReport] = []
        self._listeners.append(reports.append)
        try:
            self.start()
            if duration_us is not None:
                if isinstance(self.mode, Simulated):
                    self.runtime.run_until(self.runtime.now_us() + duration_us)
                else:
                    self.runtime.sleep(duration_us)
            if until_served is not None:
                def served() -> int:
                    if protocol is None:
                        return sum(r.processed for r in reports)
                    key = "udp_received" if protocol == "udp" else protocol
                    return sum(getattr(r, key) for r in reports)

                self.runtime.wait_for(lambda: served() >= until_served, limit_us)
        finally:
            self._listeners.remove(reports.append)
        return reports

    def add_listener(self, fn) -> None:
        self._listeners.append(fn)

    # -- direct state access ------------------------------------------------

    def read_variable(self, name: str) -> float:
        return self.table.get(name)

    def write_variable(self, name: str, value: float) -> None:
        with self.runtime.locked():
            self.table.set(name, value)

    def remove_variable(self, name: str) -> None:
        with self.runtime.locked():
            self.table.remove(name)
            self.scan.copy_rules = [r for r in self.scan.copy_rules if name not in r]

    # -- link-host interface ------------------------------------------------

    @property
    def link_address(self) -> Address:
        return self._cip_ep.address

    def tag_direction(self, name: str) -> Direction | None:
        if name not in self.table:
            return None
        publish = self.table.variable(name).publish
        if publish is Publish.INPUT:
            return Direction.INPUT
        if publish is Publish.OUTPUT:
            return Direction.OUTPUT
        return None

    def has_connection(self, connection_id: int) -> bool:
        return connection_id in self._producers or connection_id in self._consumers

    def attach_producer(self, state: ProducerState) -> None:
        with self.runtime.locked():
            self._producers[state.link.connection_id] = state

    def attach_consumer(self, link: TagLink, tag: str) -> ConsumerCell:
        cell = ConsumerCell(link.connection_id)
        with self.runtime.locked():
            self._consumers[link.connection_id] = (cell, tag)
        return cell

    # -- the scan -----------------------------------------------------------

    def scan_step(self) -> ScanReport:
        now = self.runtime.now_us()
        c = _Counts()
        self._drain(c)
        self._apply_writes(c)
        for src, dst in self.scan.copy_rules:
            self.table.set_bits(dst, self.table.get_bits(src))
        self._serve_reads(c)
        self._advance_rungs(c)
        self._produce(now, c)
        report = ScanReport(self.scan_count, now, **c.__dict__)
        self.scan_count += 1
        if self.verbose:
            log.info(report.log_line())
        for fn in self._listeners:
            fn(report)
        return report

    def _drain(self, c: _Counts) -> None:
        inbox = self._inbox["fins"]
        while inbox:
            data, src = inbox.popleft()
            try:
                frame = fins.decode_frame(data)
            except DecodeError as exc:
                self._fins_q.append((_WRITE, ("error", data, exc), src))
                continue
            if not isinstance(frame, fins.FinsRequest):
                self._fins_q.append((_WRITE, ("error", data, None), src))
                continue
            kind = _READ if isinstance(frame.command, fins.MemoryAreaRead) else _WRITE
            self._fins_q.append((kind, frame, src))

        inbox = self._inbox["cip"]
        while inbox:
            data, src = inbox.popleft()
            if ciplite.is_link_message(data):
                self._link_q.append((data, src))
                continue
            try:
                req = ciplite.decode_request(data)
            except DecodeError:
                self._cip_q.append((_WRITE, ("error", data), src))
                continue
            kind = _WRITE if req.service == ciplite.SERVICE_WRITE else _READ
            self._cip_q.append((kind, req, src))

        inbox = self._inbox["udp"]
        while inbox:
            self._echo_q.append(inbox.popleft())

    def _send(self, ep, data: bytes, dest: Address, c: _Counts) -> None:
        ep.send(data, dest)
        c.emitted += 1

    def _apply_writes(self, c: _Counts) -> None:
        while self._fins_q and self._fins_q[0][0] == _WRITE:
            _, item, src = self._fins_q.popleft()
            if isinstance(item, tuple):
                c.errors += 1
                reply = fins.error_response_bytes(item[1], _fins_end_code_for(item[2]))
                if reply is not None:
                    self._send(self._fins_ep, reply, src, c)
                continue
            c.fins += 1
            cmd = item.command
            end = fins.END_OK
            if cmd.area_code != fins.AREA_DM:
                end = fins.END_AREA_MISSING
            else:
                try:
                    self.table.write_words(cmd.address, list(cmd.words))
                except AddressError:
                    end = fins.END_ADDRESS_RANGE
            if end != fins.END_OK:
                c.errors += 1
            resp = fins.FinsResponse(item.header.reply(), fins.MEMORY_AREA_WRITE, end)
            self._send(self._fins_ep, fins.encode_frame(resp), src, c)

        while self._cip_q and self._cip_q[0][0] == _WRITE:
            _, req, src = self._cip_q.popleft()
            if isinstance(req, tuple):
                c.errors += 1
                data = req[1]
                if len(data) >= 3:
                    resp = ciplite.ExplicitResponse(data[0] & 0x7F, int.from_bytes(data[1:3], "big"), ciplite.STATUS_MALFORMED)
                    self._send(self._cip_ep, ciplite.encode_response(resp), src, c)
                continue
            c.cip += 1
            status = self._check_tag(req.name)
            if status == ciplite.STATUS_OK and self.tag_direction(req.name) is not Direction.INPUT:
                status = ciplite.STATUS_DIRECTION
            if status == ciplite.STATUS_OK:
                self.table.set_bits(req.name, req.value_bits)
            else:
                c.errors += 1
            resp = ciplite.ExplicitResponse(req.service, req.request_id, status)
            self._send(self._cip_ep, ciplite.encode_response(resp), src, c)

        now = self.runtime.now_us()
        while self._link_q:
            data, src = self._link_q.popleft()
            try:
                msg = LinkMessage.decode(data)
            except DecodeError:
                c.errors += 1
                continue
            entry = self._consumers.get(msg.connection_id)
            if entry is None:
                c.errors += 1
                continue
            cell, tag = entry
            if cell.offer(msg, now) and tag in self.table:
                self.table.set_bits(tag, msg.value_bits)
                c.links += 1

    def _check_tag(self, name: str) -> int:
        if name not in self.table or self.table.variable(name).publish is Publish.NONE:
            return ciplite.STATUS_UNKNOWN_TAG
        return ciplite.STATUS_OK

    def _serve_reads(self, c: _Counts) -> None:
        while self._fins_q and self._fins_q[0][0] == _READ:
            _, req, src = self._fins_q.popleft()
            c.fins += 1
            cmd = req.command
            payload: tuple[int, ...] = ()
            end = fins.END_OK
            if cmd.area_code != fins.AREA_DM:
                end = fins.END_AREA_MISSING
            else:
                try:
                    payload = tuple(self.table.read_words(cmd.address, cmd.count))
                except AddressError:
                    end = fins.END_ADDRESS_RANGE
            if end != fins.END_OK:
                c.errors += 1
            resp = fins.FinsResponse(req.header.reply(), fins.MEMORY_AREA_READ, end, payload)
            self._send(self._fins_ep, fins.encode_frame(resp), src, c)

        while self._cip_q and self._cip_q[0][0] == _READ:
            _, req, src = self._cip_q.popleft()
            c.cip += 1
            if req.service == ciplite.SERVICE_LIST:
                tags = tuple((v.name, self.tag_direction(v.name)) for v in self.table.published())
                resp = ciplite.ExplicitResponse(req.service, req.request_id, ciplite.STATUS_OK, tags=tags)
            else:
                status = self._check_tag(req.name)
                bits = self.table.get_bits(req.name) if status == ciplite.STATUS_OK else None
                if status != ciplite.STATUS_OK:
                    c.errors += 1
                resp = ciplite.ExplicitResponse(req.service, req.request_id, status, bits)
            self._send(self._cip_ep, ciplite.encode_response(resp), src, c)

    def _advance_rungs(self, c: _Counts) -> None:
        state = self.echo
        for rung in state.rungs:
            if rung.pending is not None and rung.received_scan < self.scan_count:
                bits, src = rung.pending
                if bits == udplink.QUERY_BITS:
                    reply = self.table.get_bits(self._output_name()) if self._output_name() else bits
                else:
                    reply = bits
                self._send(self._echo_ep, udplink.encode_bits(reply), src, c)
                c.udp_sent += 1
                rung.pending = None
        rung = state.rungs[state.active]
        while rung.pending is None and self._echo_q:
            data, src = self._echo_q.popleft()
            try:
                bits = udplink.decode_bits(data)
            except DecodeError:
                c.errors += 1
                continue
            c.udp_received += 1
            rung.pending = (bits, src)
            rung.received_scan = self.scan_count
            if bits != udplink.QUERY_BITS and self._input_name():
                self.table.set_bits(self._input_name(), bits)
        state.active ^= 1

    def _input_name(self) -> str | None:
        return self.scan.copy_rules[0][0] if self.scan.copy_rules else None

    def _output_name(self) -> str | None:
        return self.scan.copy_rules[0][1] if self.scan.copy_rules else None

    def _produce(self, now: int, c: _Counts) -> None:
        for state in self._producers.values():
            rpi = state.link.rpi_us
            if state.last_emit_us is not None and now - state.last_emit_us < rpi:
                continue
            if state.tag not in self.table:
                continue
            state.sequence = (state.sequence + 1) & 0xFFFF_FFFF
            state.last_emit_us = now
            msg = LinkMessage(state.link.connection_id, state.sequence, self.table.get_bits(state.tag), now)
            data = msg.encode()
            for target in state.targets:
                self._send(self._cip_ep, data, target, c)
            c.produced += 1

    # -- teardown -----------------------------------------------------------

    def close(self) -> None:
        if getattr(self, "closed", False):
            return
        self.closed = True
        self.stop()
        for name in ("_fins_ep", "_cip_ep", "_echo_ep"):
            ep = getattr(self, name, None)
            if ep is not None:
                ep.close()
        if self._owns_runtime:
            self.runtime.close()

    def __enter__(self) -> Emulator:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _fins_end_code_for(exc: DecodeError | None) -> int:
    if exc is None:
        return fins.END_UNDEFINED_COMMAND
    if exc.kind == "unsupported command":
        return fins.END_UNDEFINED_COMMAND
    if exc.kind == "trailing bytes":
        return fins.END_COMMAND_TOO_LONG
    if exc.kind.startswith("truncated"):
        return fins.END_COMMAND_TOO_SHORT
    return fins.END_ELEMENTS_MISMATCH


def create_emulator(
    variables: Iterable[Variable],
    scan: ScanConfig | None = None,
    mode: Simulated | Loopback | None = None,
    *,
    autostart: bool = True,
) -> Emulator:
    """Build an emulator with every variable zeroed and the scan clock at 0.

    Raises :class:`ConfigurationError` for duplicate names, overlapping DM
    ranges or copy rules naming unknown variables, and
    :class:`~plcbench.errors.StartupError` when a port cannot be bound.
    """
    scan = scan or ScanConfig()
    if scan.task_period_us <= 0:
        raise ConfigurationError("task period must be positive")
    table = VariableTable(variables)
    for src, dst in scan.copy_rules:
        for name in (src, dst):
            if name not in table:
                raise ConfigurationError(f"copy rule references unknown variable {name!r}")
    if mode is None:
        mode = Simulated(SimChannel())
    return Emulator(table, ScanConfig(scan.task_period_us, list(scan.copy_rules)), mode, autostart=autostart)


def standard_variables() -> list[Variable]:
    """The two-variable fixture: CIn (input, DM0) and COut (output, DM4)."""
    return [
        Variable("CIn", Publish.INPUT, 0),
        Variable("COut", Publish.OUTPUT, 4),
    ]


def standard_scan(task_period_us: int = 1000) -> ScanConfig:
    return ScanConfig(task_period_us, [("CIn", "COut")])
