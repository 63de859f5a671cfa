"""Benchmark harness: trials, statistics, reports and the command line."""

from __future__ import annotations

from .harness import BenchConfig, BenchBed, compare, read_samples_csv, run_trials, write_samples_csv
from .report import Cell, Report, format_report
from .stats import LatencySample, LatencyStats, Outcome, compute_stats, nearest_rank

__all__ = [
    "BenchConfig",
    "Cell",
    "LatencySample",
    "LatencyStats",
    "Outcome",
    "Report",
    "BenchBed",
    "compare",
    "compute_stats",
    "format_report",
    "nearest_rank",
    "read_samples_csv",
    "run_trials",
    "write_samples_csv",
]
