from __future__ import annotations

import csv
import io
import json

import pytest

from plcbench.bench.report import Cell, Report, format_report
from plcbench.bench.stats import compute_stats

TABLE_MEANS = {
    "FINS": (4.41, 4.41, 5.59),
    "CIP": (4.07, 3.92, 4.00),
    "UDP": (1.78, 2.00, 4.00),
    "OPC": (15.63, 7.82, 15.64),
}

EXPECTED_TABLE = """\
| Protocol | Read, ms | Write, ms | Write/Read Cycle, ms |
|----------|----------|-----------|----------------------|
| FINS | 4.41 | 4.41 | 5.59 |
| CIP | 4.07 | 3.92 | 4.00 |
| UDP | 1.78 | 2.00 | 4.00 |
| OPC | 15.63 | 7.82 | 15.64 |
"""


def report_from_means(means: dict) -> Report:
    cells = []
    for proto, values in means.items():
        for kind, ms in zip(("read", "write", "cycle"), values):
            cells.append(Cell(proto, kind, compute_stats([round(ms * 1000)])))
    return Report(cells, {"trials": 1}, "2026-01-01T00:00:00+00:00")


def test_table_rendering():
    assert format_report(report_from_means(TABLE_MEANS)).decode() == EXPECTED_TABLE


def test_single_cell_table():
    text = format_report(Report([Cell("UDP", "cycle", compute_stats([3000]))])).decode()
    lines = text.splitlines()
    assert len(lines) == 3
    assert lines[2] == "| UDP | - | - | 3.00 |"


def test_failed_cell_is_marked():
    rep = Report([Cell("OPC", "read", None, "aborted"), Cell("OPC", "write", compute_stats([2000]))])
    assert "| OPC | FAILED | 2.00 | - |" in format_report(rep).decode()


def test_json_round_trip():
    rep = report_from_means(TABLE_MEANS)
    data = format_report(rep, "json")
    assert Report.from_json(data) == rep
    assert json.loads(data)["cells"][0]["stats"]["mean"] == 4410.0


def test_csv_has_full_stats():
    rep = report_from_means(TABLE_MEANS)
    rows = list(csv.DictReader(io.StringIO(format_report(rep, "csv").decode())))
    assert len(rows) == 12
    assert rows[0]["protocol"] == "FINS" and rows[0]["mean_us"] == "4410.0"
    assert {"p95_us", "p99_us", "stddev_us", "count"} <= set(rows[0])


def test_unknown_format():
    with pytest.raises(ValueError):
        format_report(Report(), "xml")
