"""Command line: ``serve``, ``bench``, ``compare`` and ``replay``.

Exit status is 0 on success, 2 for usage errors and 1 when a run aborts or
anything else fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from ..ciplite import Direction, RemoteNode, TagLink, create_link
from ..errors import PlcBenchError, RunAborted
from ..plcsim import Loopback, create_emulator
from ..plcsim.config import PlcConfig
from .harness import BenchConfig, compare, read_samples_csv, run_trials, write_samples_csv
from .report import format_report
from .stats import Outcome, compute_stats

log = logging.getLogger("plcbench")

_PARAM_FLAGS = (
    ("--task-period-us", "task_period_us"),
    ("--delay-us", "one_way_delay_us"),
    ("--jitter-us", "jitter_us"),
    ("--rpi-us", "rpi_us"),
    ("--scan-rate-us", "scan_rate_us"),
    ("--timeout-us", "timeout_us"),
    ("--pacing-us", "pacing_us"),
    ("--seed", "seed"),
)


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("sim", "simulated", "loopback"), default="simulated")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--warmup", type=int, default=1_000)
    p.add_argument("--config", type=Path, help="key = value file shared with serve")
    p.add_argument("--connect", metavar="HOST", help="loopback: use an emulator already started with serve")
    for flag, dest in _PARAM_FLAGS:
        p.add_argument(flag, dest=dest, type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plcbench", description="PLC protocol latency benchmark")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the PLC emulator on local UDP ports")
    serve.add_argument("--config", type=Path)
    serve.add_argument("--verbose", dest="scan_log", action="store_true", help="log one line per scan")
    serve.add_argument("--duration-us", type=int, default=None, help="stop after this long (default: until Ctrl-C)")

    bench = sub.add_parser("bench", help="time one protocol operation")
    bench.add_argument("--protocol", required=True, choices=("fins", "cip-explicit", "cip-linked", "udp", "opc"))
    bench.add_argument("--kind", required=True, choices=("read", "write", "cycle"))
    bench.add_argument("--pipelined", action="store_true", help="FINS cycle: send the read before the write reply")
    bench.add_argument("--samples-out", type=Path)
    bench.add_argument("--stats-out", type=Path)
    _add_run_options(bench)

    cmp_ = sub.add_parser("compare", help="run the 4 x 3 protocol matrix")
    cmp_.add_argument("--out", type=Path, help="report file (default: stdout)")
    cmp_.add_argument("--format", choices=("markdown", "csv", "json"), default=None)
    cmp_.add_argument("--samples-dir", type=Path, help="write one samples CSV per cell here")
    _add_run_options(cmp_)

    replay = sub.add_parser("replay", help="recompute stats from a samples CSV")
    replay.add_argument("samples", type=Path)
    return parser


def _bench_config(args, protocol: str, kind: str, pipelined: bool = False) -> BenchConfig:
    overrides = {dest: getattr(args, dest) for _, dest in _PARAM_FLAGS if getattr(args, dest) is not None}
    common = dict(
        trials=args.trials, warmup=args.warmup, mode=args.mode, pipelined=pipelined, connect=args.connect, **overrides
    )
    if args.config is not None:
        return BenchConfig.from_plc_config(protocol, kind, PlcConfig.from_file(args.config), **common)
    return BenchConfig(protocol, kind, **common)


def _stats_json(stats, samples, cfg: BenchConfig) -> str:
    outcomes = {o.value: sum(1 for s in samples if s.outcome is o) for o in Outcome}
    return json.dumps({"config": cfg.to_dict(), "outcomes": outcomes, "stats": stats.to_dict()}, indent=2) + "\n"


def cmd_serve(args) -> int:
    cfg = PlcConfig.from_file(args.config) if args.config else PlcConfig()
    plc = create_emulator(cfg.variables, cfg.scan_config(), Loopback(cfg.host, cfg.ports))
    plc.verbose = args.scan_log
    pc = RemoteNode(plc.runtime, (cfg.pc_host, cfg.pc_link_port))
    nodes = {"plc": plc, "pc": pc}
    for spec in cfg.links:
        for node_name, tag in (spec.producer, *spec.consumers):
            if node_name == "pc":
                # the remote side declares nothing; trust the link's direction
                pc.directions[tag] = Direction.OUTPUT if (node_name, tag) == spec.producer else Direction.INPUT
        link = TagLink(
            spec.connection_id,
            (nodes[spec.producer[0]], spec.producer[1]),
            [(nodes[n], t) for n, t in spec.consumers],
            spec.rpi_us,
        )
        create_link(link)
    print(
        f"serving: fins {plc.fins_address[1]}, cip {plc.cip_address[1]}, echo {plc.echo_address[1]} "
        f"on {cfg.host}, task period {cfg.task_period_us} us, {len(cfg.links)} tag links",
        flush=True,
    )
    try:
        if args.duration_us is not None:
            time.sleep(args.duration_us / 1e6)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        plc.close()
    return 0


def cmd_bench(args) -> int:
    cfg = _bench_config(args, args.protocol, args.kind, args.pipelined)
    try:
        samples = run_trials(cfg)
    except RunAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.samples_out and exc.samples:
            write_samples_csv(exc.samples, args.samples_out)
        return 1
    stats = compute_stats(samples)
    if args.samples_out:
        write_samples_csv(samples, args.samples_out)
    text = _stats_json(stats, samples, cfg)
    if args.stats_out:
        args.stats_out.write_text(text, encoding="utf-8")
    label = f"{cfg.protocol} {cfg.kind}{' (pipelined)' if cfg.pipelined else ''}"
    print(
        f"{label}: n={stats.count} mean={stats.mean:.1f} median={stats.median:.0f} "
        f"p95={stats.p95:.0f} p99={stats.p99:.0f} min={stats.min:.0f} max={stats.max:.0f} "
        f"stddev={stats.stddev:.1f} (us)"
    )
    return 0


def cmd_compare(args) -> int:
    base = _bench_config(args, "fins", "read")
    report, samples = compare(base, progress=lambda what: log.info("running %s", what))
    fmt = args.format
    if fmt is None:
        suffix = args.out.suffix.lower() if args.out else ""
        fmt = {".csv": "csv", ".json": "json"}.get(suffix, "markdown")
    data = format_report(report, fmt)
    if args.out:
        args.out.write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    if args.samples_dir:
        args.samples_dir.mkdir(parents=True, exist_ok=True)
        for (row, kind), got in samples.items():
            write_samples_csv(got, args.samples_dir / f"{row.lower()}_{kind}.csv")
    failed = [c for c in report.cells if c.stats is None]
    for c in failed:
        print(f"error: {c.protocol} {c.kind}: {c.failure}", file=sys.stderr)
    return 1 if failed else 0


def cmd_replay(args) -> int:
    samples = read_samples_csv(args.samples)
    stats = compute_stats(samples)
    print(json.dumps(stats.to_dict(), indent=2))
    return 0


COMMANDS = {"serve": cmd_serve, "bench": cmd_bench, "compare": cmd_compare, "replay": cmd_replay}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    for name in ("trials", "warmup"):
        value = getattr(args, name, None)
        if value is not None and value < (1 if name == "trials" else 0):
            parser.print_usage(sys.stderr)
            print(f"plcbench: error: --{name} out of range: {value}", file=sys.stderr)
            return 2
    try:
        return COMMANDS[args.command](args)
    except (PlcBenchError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
