"""Latency benchmarking of PLC-PC protocols against a scan-cycle PLC emulator."""

__version__ = "0.1.0"
