"""Trial runner: builds a PLC + clients testbed and times operations on it."""

from __future__ import annotations

import csv
import logging
import random
import time
from collections import Counter
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from .. import ciplite
from ..ciplite import CipClient, Direction, LinkNode, RemoteNode, Tag, TagLink
from ..errors import ConfigurationError, PlcBenchError, ProtocolTimeout, RunAborted
from ..fins import FinsClient
from ..lreal import float_to_bits
from ..net import RealRuntime, SimChannel
from ..opcgw import OpcGateway
from ..plcsim import Loopback, Ports, Simulated, create_emulator, standard_scan, standard_variables
from ..plcsim.config import PlcConfig
from ..udplink import UdpClient
from .report import Cell, Report
from .stats import LatencySample, Outcome, compute_stats

log = logging.getLogger(__name__)

PROTOCOLS = ("fins", "cip-explicit", "cip-linked", "udp", "opc")
KINDS = ("read", "write", "cycle")
MODES = ("simulated", "loopback")

ABORT_FRACTION = 0.01

# DM words of the fixture variables
CIN_DM = 0
COUT_DM = 4
PC_TO_PLC_CONNECTION = 0x100
PLC_TO_PC_CONNECTION = 0x101


@dataclass
class BenchConfig:
    protocol: str
    kind: str
    trials: int = 100_000
    warmup: int = 1_000
    mode: str = "simulated"
    pipelined: bool = False
    task_period_us: int = 1000
    one_way_delay_us: int = 1000
    jitter_us: int = 0
    rpi_us: int = 1000
    scan_rate_us: int = 10_000
    timeout_us: int = 500_000
    pacing_us: int = 0
    seed: int = 0
    overhead_us: dict[str, int] = field(default_factory=dict)
    connect: str | None = None
    ports: Ports = field(default_factory=Ports)
    pc_link_port: int = 2222

    def __post_init__(self) -> None:
        if self.mode == "sim":
            self.mode = "simulated"
        if self.protocol not in PROTOCOLS:
            raise ConfigurationError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.kind not in KINDS:
            raise ConfigurationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if self.warmup < 0:
            raise ConfigurationError("warmup must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ports"] = asdict(self.ports)
        return d

    @classmethod
    def from_plc_config(cls, protocol: str, kind: str, plc: PlcConfig, **overrides) -> BenchConfig:
        base = dict(
            task_period_us=plc.task_period_us,
            one_way_delay_us=plc.one_way_delay_us,
            jitter_us=plc.jitter_us,
            rpi_us=plc.rpi_us,
            scan_rate_us=plc.scan_rate_us,
            seed=plc.seed,
            overhead_us=dict(plc.overhead_us),
            ports=plc.ports,
            pc_link_port=plc.pc_link_port,
        )
        base.update(overrides)
        return cls(protocol, kind, **base)


class BenchBed:
    """An emulated PLC plus lazily created protocol clients.

    In simulated mode everything shares one :class:`SimChannel`. In loopback
    mode the PLC gets its own scan thread and ephemeral UDP ports on
    127.0.0.1 (or, with ``connect``, an emulator started elsewhere via
    ``serve`` is used), and the clients share a second loop thread.
    """

    def __init__(self, cfg: BenchConfig) -> None:
        self.cfg = cfg
        self.plc = None
        if cfg.mode == "simulated":
            self.net = SimChannel(
                one_way_delay_us=cfg.one_way_delay_us,
                jitter_us=cfg.jitter_us,
                overhead_us=cfg.overhead_us,
                seed=cfg.seed,
            )
            self.plc = create_emulator(standard_variables(), standard_scan(cfg.task_period_us), Simulated(self.net))
            self.client_host = "pc"
        else:
            if cfg.connect is None:
                self.plc = create_emulator(
                    standard_variables(),
                    standard_scan(cfg.task_period_us),
                    Loopback("127.0.0.1", Ports(0, 0, 0)),
                )
            self.net = RealRuntime(name="bench-clients")
            self.client_host = "127.0.0.1"
        if self.plc is not None:
            self.fins_address = self.plc.fins_address
            self.cip_address = self.plc.cip_address
            self.echo_address = self.plc.echo_address
        else:
            host = cfg.connect
            self.fins_address = (host, cfg.ports.fins)
            self.cip_address = (host, cfg.ports.cip)
            self.echo_address = (host, cfg.ports.echo)
        self.runtime = self.net.runtime
        self._fins = self._cip = self._udp = self._node = self._gw = None
        self._link_in = None

    def fins(self) -> FinsClient:
        if self._fins is None:
            self._fins = FinsClient(self.net, self.fins_address, timeout_us=self.cfg.timeout_us)
        return self._fins

    def cip(self) -> CipClient:
        if self._cip is None:
            self._cip = CipClient(self.net, self.cip_address, timeout_us=self.cfg.timeout_us)
        return self._cip

    def udp(self) -> UdpClient:
        if self._udp is None:
            self._udp = UdpClient(self.net, self.echo_address, timeout_us=self.cfg.timeout_us)
        return self._udp

    def links(self) -> tuple[LinkNode, ciplite.LinkHandle]:
        """PC node with COut -> PLC.CIn and PLC.COut -> CIn links, primed."""
        if self._node is None:
            local = None
            if self.plc is None:
                local = (self.client_host, self.cfg.pc_link_port)
            node = LinkNode(self.net, [Tag("CIn", Direction.INPUT), Tag("COut", Direction.OUTPUT)], address=local)
            if self.plc is not None:
                plc_node = self.plc
            else:
                plc_node = RemoteNode(
                    self.runtime, self.cip_address, {"CIn": Direction.INPUT, "COut": Direction.OUTPUT}
                )
            rpi = self.cfg.rpi_us
            ciplite.create_link(TagLink(PC_TO_PLC_CONNECTION, (node, "COut"), [(plc_node, "CIn")], rpi))
            self._link_in = ciplite.create_link(TagLink(PLC_TO_PC_CONNECTION, (plc_node, "COut"), [(node, "CIn")], rpi))
            self._node = node
            cell = self._link_in.cells[0][1]
            if not self.runtime.wait_for(lambda: cell.snapshot is not None, self.cfg.timeout_us):
                raise ProtocolTimeout("no tag link data from the PLC")
        return self._node, self._link_in

    def gateway(self) -> OpcGateway:
        if self._gw is None:
            gw = OpcGateway(self.net, read_timeout_us=self.cfg.timeout_us)
            chan = gw.add_channel("Channel1", (self.client_host, 0))
            dev = gw.add_device(chan, "PLC", self.cip_address, scan_rate_us=self.cfg.scan_rate_us)
            gw.auto_create_items(dev)
            self._gw = gw
        return self._gw

    def close(self) -> None:
        for client in (self._fins, self._cip, self._udp, self._node, self._gw):
            if client is not None:
                client.close()
        if self.plc is not None:
            self.plc.close()
        if self.runtime.mode == "loopback":
            self.runtime.close()

    def __enter__(self) -> BenchBed:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


Operation = Callable[[float], "float | None"]


def make_operation(bed: BenchBed, protocol: str, kind: str, *, pipelined: bool = False) -> Operation:
    """The callable timed by one trial; takes the trial's nonce value.

    Cycle operations return the value that came back so the harness can
    check it against the nonce.
    """
    if protocol == "fins":
        c = bed.fins()
        if kind == "read":
            return lambda v: c.read(COUT_DM)
        if kind == "write":
            return lambda v: c.write(CIN_DM, v)
        if pipelined:
            return lambda v: c.cycle_pipelined(CIN_DM, COUT_DM, v)
        return lambda v: c.cycle_sync(CIN_DM, COUT_DM, v)
    if protocol == "cip-explicit":
        c = bed.cip()
        if kind == "read":
            return lambda v: c.read("COut")
        if kind == "write":
            return lambda v: c.write("CIn", v)
        return lambda v: c.cycle("CIn", "COut", v)
    if protocol == "cip-linked":
        node, handle = bed.links()
        if kind == "read":
            return lambda v: ciplite.linked_read(handle)[0]
        if kind == "write":
            return lambda v: node.set("COut", v)
        return lambda v: ciplite.linked_cycle(node, v, timeout_us=bed.cfg.timeout_us)
    if protocol == "udp":
        c = bed.udp()
        if kind == "read":
            return lambda v: c.read()
        if kind == "write":
            return lambda v: c.write(v)
        return lambda v: c.cycle(v)
    if protocol == "opc":
        gw = bed.gateway()
        if kind == "read":
            return lambda v: gw.read_sync("Channel1.PLC.COut")
        if kind == "write":
            return lambda v: gw.write_sync("Channel1.PLC.CIn", v)
        return lambda v: gw.cycle(v, write_item="Channel1.PLC.CIn", read_item="Channel1.PLC.COut")
    raise ConfigurationError(f"unknown protocol {protocol!r}")


def nonce(k: int) -> float:
    """Per-trial value, distinct for every k and never 0.0 (the fresh state)."""
    return 1.0 + k + 0.25


def run_trials(config: BenchConfig, bed: BenchBed | None = None) -> list[LatencySample]:
    """Warm up, then run ``config.trials`` timed trials back to back.

    Only the timed trials are returned, in trial order. More than 1% non-Ok
    outcomes aborts the run with :class:`RunAborted`.
    """
    own = bed is None
    if own:
        try:
            bed = BenchBed(config)
        except PlcBenchError as exc:
            raise RunAborted(f"testbed setup failed: {exc}") from exc
    try:
        return _run(config, bed)
    finally:
        if own:
            bed.close()


def _run(config: BenchConfig, bed: BenchBed) -> list[LatencySample]:
    try:
        op = make_operation(bed, config.protocol, config.kind, pipelined=config.pipelined)
    except PlcBenchError as exc:
        raise RunAborted(f"{config.protocol} {config.kind}: setup failed: {exc}") from exc
    rt = bed.runtime
    rng = random.Random(config.seed)
    check_echo = config.kind == "cycle"
    allowed = ABORT_FRACTION * config.trials
    samples: list[LatencySample] = []
    failures: Counter = Counter()
    last_error = ""
    total = config.warmup + config.trials
    for k in range(total):
        if config.pacing_us:
            rt.sleep(rng.randint(0, config.pacing_us))
        value = nonce(k)
        t0 = rt.now_us()
        try:
            result = op(value)
            t1 = rt.now_us()
            if check_echo and float_to_bits(result) != float_to_bits(value):
                raise _Mismatch(f"cycle returned {result!r}, expected {value!r}")
            sample = LatencySample(k - config.warmup, t1 - t0, Outcome.OK, t0)
        except TimeoutError as exc:
            sample = LatencySample(k - config.warmup, None, Outcome.TIMEOUT, t0, str(exc))
        except (PlcBenchError, _Mismatch) as exc:
            sample = LatencySample(k - config.warmup, None, Outcome.ERROR, t0, str(exc))
        if sample.outcome is not Outcome.OK:
            failures[sample.outcome] += 1
            last_error = sample.detail
            if sum(failures.values()) > allowed:
                raise RunAborted(
                    f"{config.protocol} {config.kind}: aborted after {k + 1} trials, "
                    f"{failures[Outcome.TIMEOUT]} timeouts, {failures[Outcome.ERROR]} errors; last: {last_error}",
                    samples,
                )
        if k >= config.warmup:
            samples.append(sample)
    return samples


class _Mismatch(Exception):
    pass


# The comparison matrix: report row -> (kind -> (protocol, pipelined))
MATRIX: dict[str, dict[str, tuple[str, bool]]] = {
    "FINS": {"read": ("fins", False), "write": ("fins", False), "cycle": ("fins", True)},
    "CIP": {"read": ("cip-explicit", False), "write": ("cip-explicit", False), "cycle": ("cip-linked", False)},
    "UDP": {"read": ("udp", False), "write": ("udp", False), "cycle": ("udp", False)},
    "OPC": {"read": ("opc", False), "write": ("opc", False), "cycle": ("opc", False)},
}


def clock_resolution_us(mode: str) -> float:
    if mode == "simulated":
        return 1.0
    return max(1.0, time.get_clock_info("monotonic").resolution * 1e6)


def compare(base: BenchConfig, *, progress: Callable[[str], None] | None = None) -> tuple[Report, dict]:
    """Run every cell of the 4x3 matrix on a fresh testbed each.

    Returns the report and the raw samples keyed by (row, kind). A cell whose
    run aborts is kept in the report with its failure message.
    """
    report = Report(
        config=base.to_dict(),
        emitted_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        clock_resolution_us=clock_resolution_us(base.mode),
    )
    samples: dict[tuple[str, str], list[LatencySample]] = {}
    for row, kinds in MATRIX.items():
        for kind, (protocol, pipelined) in kinds.items():
            cfg = replace(base, protocol=protocol, kind=kind, pipelined=pipelined)
            if progress:
                progress(f"{row} {kind} ({protocol}{', pipelined' if pipelined else ''})")
            try:
                got = run_trials(cfg)
                report.cells.append(Cell(row, kind, compute_stats(got)))
                samples[(row, kind)] = got
            except RunAborted as exc:
                report.cells.append(Cell(row, kind, None, str(exc)))
                samples[(row, kind)] = exc.samples
    return report, samples


def write_samples_csv(samples: list[LatencySample], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial_index", "latency_us", "outcome"])
        for s in samples:
            writer.writerow([s.trial, "" if s.latency_us is None else s.latency_us, s.outcome.value])


def read_samples_csv(path: str | Path) -> list[LatencySample]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"trial_index", "latency_us", "outcome"} - set(reader.fieldnames or [])
        if missing:
            raise ConfigurationError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            latency = row["latency_us"].strip()
            out.append(
                LatencySample(int(row["trial_index"]), int(latency) if latency else None, Outcome(row["outcome"]))
            )
    return out
