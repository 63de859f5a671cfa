"""Deterministic PLC emulator: variable table, scan loop, protocol endpoints."""

from ..net import RealRuntime, SimChannel, SimRuntime
from .emulator import (
    EchoRungs,
    Emulator,
    Loopback,
    Ports,
    ScanConfig,
    ScanReport,
    Simulated,
    create_emulator,
    standard_scan,
    standard_variables,
)
from .variables import Publish, Variable, VariableTable

__all__ = [
    "EchoRungs",
    "Emulator",
    "Loopback",
    "Ports",
    "Publish",
    "RealRuntime",
    "ScanConfig",
    "ScanReport",
    "SimChannel",
    "SimRuntime",
    "Simulated",
    "Variable",
    "VariableTable",
    "create_emulator",
    "standard_scan",
    "standard_variables",
]
