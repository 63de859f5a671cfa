"""Comparison report: one row per protocol, read / write / cycle columns."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .stats import LatencyStats

KIND_COLUMNS = (("read", "Read, ms"), ("write", "Write, ms"), ("cycle", "Write/Read Cycle, ms"))
STAT_FIELDS = ("count", "mean", "median", "p95", "p99", "min", "max", "stddev")


@dataclass
class Cell:
    protocol: str
    kind: str
    stats: LatencyStats | None = None
    failure: str | None = None

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "kind": self.kind,
            "stats": self.stats.to_dict() if self.stats else None,
            "failure": self.failure,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> Cell:
        stats = LatencyStats.from_dict(raw["stats"]) if raw.get("stats") else None
        return cls(raw["protocol"], raw["kind"], stats, raw.get("failure"))


@dataclass
class Report:
    cells: list[Cell] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    emitted_at: str = ""
    clock_resolution_us: float = 1.0

    def cell(self, protocol: str, kind: str) -> Cell | None:
        for c in self.cells:
            if c.protocol == protocol and c.kind == kind:
                return c
        return None

    def protocols(self) -> list[str]:
        seen: list[str] = []
        for c in self.cells:
            if c.protocol not in seen:
                seen.append(c.protocol)
        return seen

    def to_dict(self) -> dict:
        return {
            "cells": [c.to_dict() for c in self.cells],
            "config": self.config,
            "emitted_at": self.emitted_at,
            "clock_resolution_us": self.clock_resolution_us,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> Report:
        return cls(
            [Cell.from_dict(c) for c in raw["cells"]],
            raw.get("config", {}),
            raw.get("emitted_at", ""),
            float(raw.get("clock_resolution_us", 1.0)),
        )

    @classmethod
    def from_json(cls, data: bytes | str) -> Report:
        return cls.from_dict(json.loads(data))


def _ms(cell: Cell | None) -> str:
    if cell is None:
        return "-"
    if cell.stats is None:
        return "FAILED"
    return f"{cell.stats.mean / 1000:.2f}"


def _markdown(report: Report) -> str:
    header = ["Protocol"] + [title for _, title in KIND_COLUMNS]
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join("-" * (len(h) + 2) for h in header) + "|",
    ]
    for proto in report.protocols():
        row = [proto] + [_ms(report.cell(proto, kind)) for kind, _ in KIND_COLUMNS]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def _csv(report: Report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["protocol", "kind", "status"] + [f if f == "count" else f"{f}_us" for f in STAT_FIELDS])
    for c in report.cells:
        if c.stats is None:
            writer.writerow([c.protocol, c.kind, f"failed: {c.failure or ''}"] + [""] * len(STAT_FIELDS))
        else:
            writer.writerow([c.protocol, c.kind, "ok"] + [repr(getattr(c.stats, f)) for f in STAT_FIELDS])
    return buf.getvalue()


def format_report(report: Report, fmt: str = "markdown") -> bytes:
    """Render as ``markdown`` (means in ms, 2 decimals), ``csv`` or ``json``."""
    if fmt in ("markdown", "md"):
        text = _markdown(report)
    elif fmt == "csv":
        text = _csv(report)
    elif fmt == "json":
        text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return text.encode("utf-8")
