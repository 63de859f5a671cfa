"""OPC-style polling gateway on top of the CIP-lite explicit client.

Data is organised as Channel -> Device -> Item and addressed by dotted path
(``"Chan1.PLC.COut"``). Each device polls all of its items every scan rate;
a synchronous read waits for the first poll that *starts* after the call and
returns that poll's value, so read latency scales with the scan rate. Writes
skip the poll schedule and go straight to the PLC.
"""

from __future__ import annotations

import csv
import enum
from collections import deque
from dataclasses import dataclass, field
from typing import IO

from . import ciplite
from .ciplite import CipClient, ExplicitResponse
from .errors import (
    ConfigurationError,
    ConnectionFailed,
    DirectionError,
    ProtocolTimeout,
    QualityError,
    RemoteError,
    TagNameError,
)
from .lreal import bits_to_float, float_to_bits
from .net import Address

DEFAULT_SCAN_RATE_US = 10_000
DEFAULT_READ_TIMEOUT_US = 500_000


class Quality(enum.Enum):
    GOOD = "good"
    UNCERTAIN = "uncertain"
    BAD = "bad"


@dataclass
class Item:
    name: str
    value: float = 0.0
    quality: Quality = Quality.BAD
    last_refresh: int | None = None
    refresh_epoch: int = 0
    value_bits: int = 0


@dataclass(frozen=True)
class PollReport:
    device: str
    epoch: int
    started_us: int
    completed_us: int
    good: tuple[str, ...]
    bad: tuple[tuple[str, str], ...]


@dataclass
class Device:
    name: str
    target: Address
    scan_rate_us: int = DEFAULT_SCAN_RATE_US
    scan_mode: str = "RequestAllAtScanRate"
    items: dict[str, Item] = field(default_factory=dict)
    history: deque = field(default_factory=lambda: deque(maxlen=10_000))
    polls_started: int = 0
    epoch: int = 0
    channel: Channel | None = field(default=None, repr=False)
    client: CipClient | None = field(default=None, repr=False)
    _poll: dict | None = field(default=None, repr=False)
    _timer: object = field(default=None, repr=False)


@dataclass
class Channel:
    name: str
    interface: Address
    driver: str = "ciplite"
    devices: dict[str, Device] = field(default_factory=dict)


class WriteToken:
    """Completion handle for an asynchronous write; safe to ignore."""

    def __init__(self) -> None:
        self.done = False
        self.error: Exception | None = None

    def _complete(self, error: Exception | None = None) -> None:
        if not self.done:
            self.error = error
            self.done = True

    @property
    def ok(self) -> bool:
        return self.done and self.error is None


def _status_error(status: int, name: str) -> Exception | None:
    if status == ciplite.STATUS_OK:
        return None
    if status == ciplite.STATUS_UNKNOWN_TAG:
        return TagNameError(status, f"unknown tag {name!r}")
    if status == ciplite.STATUS_DIRECTION:
        return DirectionError(status, f"tag {name!r} is not writable")
    return RemoteError(status)


class OpcGateway:
    def __init__(self, net, *, read_timeout_us: int = DEFAULT_READ_TIMEOUT_US) -> None:
        self.net = net
        self.runtime = net.runtime
        self.read_timeout_us = read_timeout_us
        self.channels: dict[str, Channel] = {}
        self.last_latency_us: int | None = None

    # -- configuration ------------------------------------------------------

    def add_channel(self, name: str, interface: Address | None = None) -> Channel:
        if name in self.channels:
            raise ConfigurationError(f"duplicate channel {name!r}")
        if interface is None:
            interface = ("127.0.0.1", 0) if self.runtime.mode == "loopback" else ("pc", 0)
        ch = Channel(name, interface)
        self.channels[name] = ch
        return ch

    def add_device(
        self,
        channel: Channel,
        name: str,
        target: Address,
        *,
        scan_rate_us: int = DEFAULT_SCAN_RATE_US,
        autostart: bool = True,
    ) -> Device:
        if scan_rate_us <= 0:
            raise ConfigurationError("scan rate must be positive")
        if name in channel.devices:
            raise ConfigurationError(f"duplicate device {name!r} in channel {channel.name!r}")
        dev = Device(name, target, scan_rate_us, channel=channel)
        dev.client = CipClient(self.net, target, local=channel.interface, timeout_us=self.read_timeout_us)
        channel.devices[name] = dev
        if autostart:
            self.start(dev)
        return dev

    def add_item(self, device: Device, name: str) -> Item:
        with self.runtime.locked():
            item = device.items.get(name)
            if item is None:
                item = device.items[name] = Item(name)
        return item

    def auto_create_items(self, device: Device) -> list[Item]:
        """One item per published PLC variable, all starting with Bad quality."""
        try:
            tags = device.client.list_tags()
        except ProtocolTimeout as exc:
            raise ConnectionFailed(f"device {device.name} at {device.target} is unreachable") from exc
        return [self.add_item(device, name) for name, _ in tags]

    def resolve(self, path: str) -> tuple[Device, Item]:
        parts = path.split(".")
        if len(parts) != 3:
            raise TagNameError(ciplite.STATUS_UNKNOWN_TAG, f"item path must be Channel.Device.Item, got {path!r}")
        cname, dname, iname = parts
        try:
            dev = self.channels[cname].devices[dname]
            return dev, dev.items[iname]
        except KeyError:
            raise TagNameError(ciplite.STATUS_UNKNOWN_TAG, f"unknown item {path!r}") from None

    # -- polling ------------------------------------------------------------

    def start(self, device: Device) -> None:
        if device._timer is not None:
            return
        first = self.runtime.now_us()

        def tick(at: int) -> None:
            self._begin_poll(device)
            device._timer = self.runtime.call_at(at + device.scan_rate_us, lambda: tick(at + device.scan_rate_us))

        device._timer = self.runtime.call_at(first, lambda: tick(first))

    def stop(self, device: Device) -> None:
        if device._timer is not None:
            device._timer.cancel()
            device._timer = None

    def _begin_poll(self, device: Device) -> bool:
        if device._poll is not None:
            return False  # previous poll still running: skip this tick
        device.polls_started += 1
        now = self.runtime.now_us()
        poll = {
            "index": device.polls_started,
            "started": now,
            "pending": {},
            "good": [],
            "bad": [],
        }
        device._poll = poll
        if not device.items:
            self._finish_poll(device)
            return True
        for name in list(device.items):
            rid = device.client.submit(ciplite.SERVICE_READ, name, callback=lambda resp, n=name: self._on_read(device, n, resp))
            poll["pending"][name] = rid
        poll["timer"] = self.runtime.call_at(now + self.read_timeout_us, lambda: self._poll_timeout(device, poll))
        return True

    def _on_read(self, device: Device, name: str, resp: ExplicitResponse) -> None:
        poll = device._poll
        if poll is None or poll["pending"].get(name) != resp.request_id:
            return
        del poll["pending"][name]
        item = device.items.get(name)
        if item is not None:
            if resp.status == ciplite.STATUS_OK:
                item.value_bits = resp.value_bits
                item.value = bits_to_float(resp.value_bits)
                item.quality = Quality.GOOD
                item.last_refresh = self.runtime.now_us()
                poll["good"].append(name)
            else:
                item.quality = Quality.BAD
                poll["bad"].append((name, f"status 0x{resp.status:02X}"))
        if not poll["pending"]:
            self._finish_poll(device)

    def _poll_timeout(self, device: Device, poll: dict) -> None:
        if device._poll is not poll:
            return
        for name, rid in poll["pending"].items():
            device.client.cancel(rid)
            if name in device.items:
                device.items[name].quality = Quality.BAD
            poll["bad"].append((name, "timeout"))
        poll["pending"].clear()
        self._finish_poll(device)

    def _finish_poll(self, device: Device) -> None:
        poll = device._poll
        timer = poll.get("timer")
        if timer is not None:
            timer.cancel()
        device.epoch = poll["index"]
        for item in device.items.values():
            item.refresh_epoch = device.epoch
        report = PollReport(
            device.name,
            device.epoch,
            poll["started"],
            self.runtime.now_us(),
            tuple(poll["good"]),
            tuple(poll["bad"]),
        )
        device.history.append(report)
        device._poll = None

    def poll_tick(self, device: Device) -> PollReport:
        """Run one poll now (or join the one in flight) and wait for it."""
        with self.runtime.locked():
            if device._poll is None:
                self._begin_poll(device)
            target = device._poll["index"] if device._poll is not None else device.epoch
        if not self.runtime.wait_for(lambda: device.epoch >= target, 2 * self.read_timeout_us):
            raise ProtocolTimeout(f"poll of {device.name} did not complete")
        return next(r for r in reversed(device.history) if r.epoch == target)

    # -- client-facing access -----------------------------------------------

    def read_sync(self, path: str) -> float:
        """Value from the first poll that starts after this call."""
        device, item = self.resolve(path)
        t0 = self.runtime.now_us()
        with self.runtime.locked():
            wanted = device.polls_started + 1
        timeout = 2 * device.scan_rate_us + self.read_timeout_us
        if not self.runtime.wait_for(lambda: device.epoch >= wanted, timeout):
            raise ProtocolTimeout(f"no fresh poll of {path} within {timeout} us")
        if item.quality is not Quality.GOOD:
            raise QualityError(f"{path} has quality {item.quality.value} after refresh")
        self.last_latency_us = self.runtime.now_us() - t0
        return bits_to_float(item.value_bits)

    def write_sync(self, path: str, value: float) -> None:
        device, item = self.resolve(path)
        t0 = self.runtime.now_us()
        device.client.write(item.name, value)
        self.last_latency_us = self.runtime.now_us() - t0

    def write_async(self, path: str, value: float) -> WriteToken:
        token = WriteToken()
        try:
            device, item = self.resolve(path)
        except TagNameError as exc:
            token._complete(exc)
            return token

        def done(resp: ExplicitResponse) -> None:
            token._complete(_status_error(resp.status, item.name))

        rid = device.client.submit(ciplite.SERVICE_WRITE, item.name, value, callback=done)

        def expire() -> None:
            if not token.done:
                device.client.cancel(rid)
                token._complete(ProtocolTimeout(f"write to {path} timed out"))

        self.runtime.call_later(self.read_timeout_us, expire)
        return token

    def cycle(self, value: float, *, write_item: str, read_item: str, timeout_us: int | None = None) -> float:
        """Async write (completion ignored) then sync reads until the value is back."""
        target = float_to_bits(value)
        device, _ = self.resolve(read_item)
        timeout = timeout_us or 4 * device.scan_rate_us + 2 * self.read_timeout_us
        t0 = self.runtime.now_us()
        self.write_async(write_item, value)
        while True:
            got = self.read_sync(read_item)
            if float_to_bits(got) == target:
                break
            if self.runtime.now_us() - t0 > timeout:
                raise ProtocolTimeout(f"{read_item} did not reach the written value")
        self.last_latency_us = self.runtime.now_us() - t0
        return got

    def close(self) -> None:
        for ch in self.channels.values():
            for dev in ch.devices.values():
                self.stop(dev)
                if dev.client is not None:
                    dev.client.close()


def write_poll_csv(reports, out: IO[str]) -> None:
    writer = csv.writer(out)
    writer.writerow(["device", "epoch", "started_us", "completed_us", "good", "bad"])
    for r in reports:
        writer.writerow([
            r.device,
            r.epoch,
            r.started_us,
            r.completed_us,
            ";".join(r.good),
            ";".join(f"{name}:{why}" for name, why in r.bad),
        ])
