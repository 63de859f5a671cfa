"""Flat ``key = value`` configuration shared by ``serve`` and ``bench``.

Recognised keys (all optional)::

    task_period_us = 1000
    one_way_delay_us = 1000        # simulated mode only
    jitter_us = 0                  # simulated mode only
    seed = 0
    host = 127.0.0.1
    fins_port = 9600
    cip_port = 44818
    echo_port = 9601
    rpi_us = 1000
    scan_rate_us = 10000
    pc_host = 127.0.0.1            # where the PC link node listens
    pc_link_port = 2222
    overhead_us.fins = 0           # per-protocol server overhead (simulated)
    var.CIn = input@0              # <input|output|none>@<DM word address>
    var.COut = output@4
    copy = CIn->COut               # comma-separated copy rules, in order
    link.256 = pc.COut -> plc.CIn @ 1000    # connection id = producer -> consumers @ rpi_us
    link.257 = plc.COut -> pc.CIn @ 1000

Lines starting with ``#`` or ``;`` are comments. Without any ``var.`` keys
the CIn/COut fixture is used.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigurationError
from .emulator import Ports, ScanConfig, standard_variables
from .variables import Publish, Variable

_SECTION = "plc"


@dataclass(frozen=True)
class LinkSpec:
    connection_id: int
    producer: tuple[str, str]
    consumers: tuple[tuple[str, str], ...]
    rpi_us: int


@dataclass
class PlcConfig:
    task_period_us: int = 1000
    one_way_delay_us: int = 1000
    jitter_us: int = 0
    seed: int = 0
    host: str = "127.0.0.1"
    ports: Ports = field(default_factory=Ports)
    rpi_us: int = 1000
    scan_rate_us: int = 10_000
    pc_host: str = "127.0.0.1"
    pc_link_port: int = 2222
    overhead_us: dict[str, int] = field(default_factory=dict)
    variables: list[Variable] = field(default_factory=standard_variables)
    copy_rules: list[tuple[str, str]] = field(default_factory=lambda: [("CIn", "COut")])
    links: list[LinkSpec] = field(default_factory=list)

    def scan_config(self) -> ScanConfig:
        return ScanConfig(self.task_period_us, list(self.copy_rules))

    @classmethod
    def from_file(cls, path: str | Path) -> PlcConfig:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def from_text(cls, text: str) -> PlcConfig:
        parser = configparser.ConfigParser(
            delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=("#",), interpolation=None
        )
        parser.optionxform = str  # keep variable names case-sensitive
        try:
            parser.read_string(f"[{_SECTION}]\n" + text)
        except configparser.Error as exc:
            raise ConfigurationError(f"config syntax: {exc}") from exc
        raw = dict(parser[_SECTION])
        cfg = cls()

        def as_int(key: str, value: str) -> int:
            try:
                return int(value, 0)
            except ValueError:
                raise ConfigurationError(f"{key}: expected an integer, got {value!r}") from None

        port_keys = {"fins_port": "fins", "cip_port": "cip", "echo_port": "echo"}
        ports = {}
        variables: list[Variable] = []
        for key, value in raw.items():
            value = value.strip()
            if key in ("task_period_us", "one_way_delay_us", "jitter_us", "seed", "rpi_us", "scan_rate_us", "pc_link_port"):
                setattr(cfg, key, as_int(key, value))
            elif key in ("host", "pc_host"):
                setattr(cfg, key, value)
            elif key in port_keys:
                ports[port_keys[key]] = as_int(key, value)
            elif key.startswith("overhead_us."):
                cfg.overhead_us[key.split(".", 1)[1]] = as_int(key, value)
            elif key.startswith("var."):
                variables.append(_parse_variable(key[4:], value))
            elif key == "copy":
                cfg.copy_rules = [_parse_copy(part) for part in value.split(",") if part.strip()]
            elif key.startswith("link."):
                cfg.links.append(_parse_link(as_int(key, key[5:]), value, cfg.rpi_us))
            else:
                raise ConfigurationError(f"unknown config key {key!r}")
        if variables:
            cfg.variables = variables
        cfg.ports = Ports(**{**Ports().__dict__, **ports})
        if cfg.task_period_us <= 0:
            raise ConfigurationError("task_period_us must be positive")
        return cfg


def _parse_variable(name: str, value: str) -> Variable:
    try:
        publish, address = value.split("@")
        return Variable(name, Publish(publish.strip().lower()), int(address, 0))
    except ValueError:
        raise ConfigurationError(f"var.{name}: expected <input|output|none>@<address>, got {value!r}") from None


def _parse_copy(part: str) -> tuple[str, str]:
    if "->" not in part:
        raise ConfigurationError(f"copy rule {part!r} must look like SRC->DST")
    src, dst = (p.strip() for p in part.split("->", 1))
    return src, dst


def _node_tag(text: str) -> tuple[str, str]:
    node, _, tag = text.strip().partition(".")
    if node not in ("plc", "pc") or not tag:
        raise ConfigurationError(f"link endpoint {text!r} must be plc.<tag> or pc.<tag>")
    return node, tag


def _parse_link(cid: int, value: str, default_rpi: int) -> LinkSpec:
    rpi = default_rpi
    if "@" in value:
        value, rpi_text = value.rsplit("@", 1)
        rpi = int(rpi_text.strip(), 0)
    if "->" not in value:
        raise ConfigurationError(f"link.{cid}: expected producer -> consumer[, consumer]")
    prod, cons = value.split("->", 1)
    consumers = tuple(_node_tag(c) for c in cons.split(",") if c.strip())
    return LinkSpec(cid, _node_tag(prod), consumers, rpi)
