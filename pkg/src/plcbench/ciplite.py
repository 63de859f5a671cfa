"""CIP-style tag access: explicit read/write by name and producer-consumer links.

This is not EtherNet/IP. Only the semantics matter here, carried over a
compact UDP datagram format (big-endian):

Explicit request::

    service(1) request_id(2) name_len(1) name [value f64]

Explicit response::

    service|0x80(1) request_id(2) status(1) [value f64 | count(2) (name_len name direction)*]

Link message (implicit, connected data)::

    0x01 connection_id(4) sequence(4) value(8) produce_timestamp_us(8)

Service codes follow the CIP numbering: 0x4C read tag, 0x4D write tag,
0x55 list published tags.
"""

from __future__ import annotations

import enum
import struct
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field

from .errors import (
    ConfigurationError,
    DecodeError,
    DirectionError,
    NotReadyError,
    ProtocolTimeout,
    RemoteError,
    TagNameError,
)
from .lreal import bits_to_float, float_to_bits
from .net import Address

SERVICE_READ = 0x4C
SERVICE_WRITE = 0x4D
SERVICE_LIST = 0x55
REPLY_BIT = 0x80
LINK_DATA = 0x01

STATUS_OK = 0x00
STATUS_MALFORMED = 0x04
STATUS_UNKNOWN_TAG = 0x05
STATUS_UNSUPPORTED = 0x08
STATUS_DIRECTION = 0x0F

DEFAULT_PORT = 44818
DEFAULT_TIMEOUT_US = 500_000

_LINK = struct.Struct(">BIIQq")


class Direction(enum.Enum):
    INPUT = "input"
    OUTPUT = "output"


@dataclass(frozen=True)
class ExplicitRequest:
    service: int
    request_id: int
    name: str = ""
    value_bits: int | None = None


@dataclass(frozen=True)
class ExplicitResponse:
    service: int
    request_id: int
    status: int
    value_bits: int | None = None
    tags: tuple[tuple[str, Direction], ...] = ()


@dataclass(frozen=True)
class LinkMessage:
    connection_id: int
    sequence: int
    value_bits: int
    produce_timestamp_us: int

    def encode(self) -> bytes:
        return _LINK.pack(LINK_DATA, self.connection_id, self.sequence, self.value_bits, self.produce_timestamp_us)

    @classmethod
    def decode(cls, data: bytes) -> LinkMessage:
        if len(data) != _LINK.size:
            raise DecodeError("bad link message length", min(len(data), _LINK.size))
        kind, cid, seq, bits, ts = _LINK.unpack(data)
        if kind != LINK_DATA:
            raise DecodeError("not a link message", 0)
        return cls(cid, seq, bits, ts)

    @property
    def value(self) -> float:
        return bits_to_float(self.value_bits)


def is_link_message(data: bytes) -> bool:
    return len(data) > 0 and data[0] == LINK_DATA


def _pack_name(name: str) -> bytes:
    raw = name.encode("ascii")
    if len(raw) > 255:
        raise ValueError("tag name longer than 255 bytes")
    return bytes([len(raw)]) + raw


def encode_request(req: ExplicitRequest) -> bytes:
    out = struct.pack(">BH", req.service, req.request_id)
    if req.service == SERVICE_LIST:
        return out
    out += _pack_name(req.name)
    if req.service == SERVICE_WRITE:
        out += struct.pack(">Q", req.value_bits)
    return out


def decode_request(data: bytes) -> ExplicitRequest:
    if len(data) < 3:
        raise DecodeError("truncated header", len(data))
    service, rid = struct.unpack_from(">BH", data)
    if service not in (SERVICE_READ, SERVICE_WRITE, SERVICE_LIST):
        raise DecodeError("unsupported service", 0, f"0x{service:02X}")
    if service == SERVICE_LIST:
        if len(data) != 3:
            raise DecodeError("trailing bytes", 3)
        return ExplicitRequest(service, rid)
    if len(data) < 4 or len(data) < 4 + data[3]:
        raise DecodeError("truncated name", len(data))
    end = 4 + data[3]
    try:
        name = data[4:end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise DecodeError("invalid name", 4) from exc
    value_bits = None
    if service == SERVICE_WRITE:
        if len(data) < end + 8:
            raise DecodeError("truncated value", len(data))
        (value_bits,) = struct.unpack_from(">Q", data, end)
        end += 8
    if len(data) != end:
        raise DecodeError("trailing bytes", end)
    return ExplicitRequest(service, rid, name, value_bits)


def encode_response(resp: ExplicitResponse) -> bytes:
    out = struct.pack(">BHB", resp.service | REPLY_BIT, resp.request_id, resp.status)
    if resp.status != STATUS_OK:
        return out
    if resp.service == SERVICE_READ:
        out += struct.pack(">Q", resp.value_bits)
    elif resp.service == SERVICE_LIST:
        out += struct.pack(">H", len(resp.tags))
        for name, direction in resp.tags:
            out += _pack_name(name) + bytes([1 if direction is Direction.INPUT else 2])
    return out


def decode_response(data: bytes) -> ExplicitResponse:
    if len(data) < 4:
        raise DecodeError("truncated header", len(data))
    service, rid, status = struct.unpack_from(">BHB", data)
    if not service & REPLY_BIT:
        raise DecodeError("not a response", 0)
    service &= ~REPLY_BIT
    pos = 4
    value_bits = None
    tags: list[tuple[str, Direction]] = []
    if status == STATUS_OK and service == SERVICE_READ:
        if len(data) < pos + 8:
            raise DecodeError("truncated value", len(data))
        (value_bits,) = struct.unpack_from(">Q", data, pos)
        pos += 8
    elif status == STATUS_OK and service == SERVICE_LIST:
        if len(data) < pos + 2:
            raise DecodeError("truncated count", len(data))
        (count,) = struct.unpack_from(">H", data, pos)
        pos += 2
        for _ in range(count):
            if len(data) < pos + 1 or len(data) < pos + 2 + data[pos]:
                raise DecodeError("truncated tag list", len(data))
            n = data[pos]
            name = data[pos + 1 : pos + 1 + n].decode("ascii", errors="replace")
            direction = Direction.INPUT if data[pos + 1 + n] == 1 else Direction.OUTPUT
            tags.append((name, direction))
            pos += 2 + n
    if len(data) != pos:
        raise DecodeError("trailing bytes", pos)
    return ExplicitResponse(service, rid, status, value_bits, tuple(tags))


def _raise_for_status(status: int, name: str) -> None:
    if status == STATUS_OK:
        return
    if status == STATUS_UNKNOWN_TAG:
        raise TagNameError(status, f"unknown tag {name!r}")
    if status == STATUS_DIRECTION:
        raise DirectionError(status, f"tag {name!r} is not writable (not input-published)")
    raise RemoteError(status, f"CIP status 0x{status:02X} for {name!r}")


class CipClient:
    """Explicit tag client; several requests may be outstanding at once."""

    def __init__(self, net, server: Address, *, local: Address | None = None, timeout_us: int = DEFAULT_TIMEOUT_US) -> None:
        self.runtime = net.runtime
        self.server = server
        self.timeout_us = timeout_us
        self._next_id = 1
        self._outstanding: dict[int, Callable[[ExplicitResponse], None] | None] = {}
        self._responses: dict[int, ExplicitResponse] = {}
        self.unmatched = 0
        self.last_latency_us: int | None = None
        host = "127.0.0.1" if self.runtime.mode == "loopback" else "pc"
        self.endpoint = net.open(local or (host, 0), self._on_datagram)

    def close(self) -> None:
        self.endpoint.close()

    def _on_datagram(self, data: bytes, src: Address) -> None:
        try:
            resp = decode_response(data)
        except DecodeError:
            self.unmatched += 1
            return
        if resp.request_id not in self._outstanding:
            self.unmatched += 1
            return
        callback = self._outstanding.pop(resp.request_id)
        if callback is None:
            self._responses[resp.request_id] = resp
        else:
            callback(resp)

    def submit(
        self,
        service: int,
        name: str = "",
        value: float | None = None,
        callback: Callable[[ExplicitResponse], None] | None = None,
    ) -> int:
        """Send a request without waiting.

        With ``callback`` the response is handed to it on the runtime's
        thread; otherwise it is kept for :meth:`collect`.
        """
        with self.runtime.locked():
            rid = self._next_id
            while rid in self._outstanding:
                rid = rid % 0xFFFF + 1
            self._next_id = rid % 0xFFFF + 1
            self._outstanding[rid] = callback
        bits = float_to_bits(value) if value is not None else None
        self.endpoint.send(encode_request(ExplicitRequest(service, rid, name, bits)), self.server)
        return rid

    def cancel(self, rid: int) -> None:
        with self.runtime.locked():
            self._outstanding.pop(rid, None)
            self._responses.pop(rid, None)

    def collect(self, rid: int, timeout_us: int | None = None) -> ExplicitResponse:
        timeout = self.timeout_us if timeout_us is None else timeout_us
        if not self.runtime.wait_for(lambda: rid in self._responses, timeout):
            self.cancel(rid)
            raise ProtocolTimeout(f"no CIP response for request {rid} within {timeout} us")
        with self.runtime.locked():
            return self._responses.pop(rid)

    def read(self, name: str) -> float:
        t0 = self.runtime.now_us()
        resp = self.collect(self.submit(SERVICE_READ, name))
        _raise_for_status(resp.status, name)
        self.last_latency_us = self.runtime.now_us() - t0
        return bits_to_float(resp.value_bits)

    def write(self, name: str, value: float) -> None:
        t0 = self.runtime.now_us()
        resp = self.collect(self.submit(SERVICE_WRITE, name, value))
        _raise_for_status(resp.status, name)
        self.last_latency_us = self.runtime.now_us() - t0

    def list_tags(self) -> list[tuple[str, Direction]]:
        resp = self.collect(self.submit(SERVICE_LIST))
        _raise_for_status(resp.status, "*")
        return list(resp.tags)

    def cycle(self, write_name: str, read_name: str, value: float) -> float:
        """Explicit write followed by explicit read, both synchronous."""
        t0 = self.runtime.now_us()
        self.write(write_name, value)
        result = self.read(read_name)
        self.last_latency_us = self.runtime.now_us() - t0
        return result


# --------------------------------------------------------------------------
# Tag data links


@dataclass
class Tag:
    name: str
    direction: Direction
    value: float = 0.0
    last_update: int | None = None


@dataclass(frozen=True)
class LinkSnapshot:
    value_bits: int
    sequence: int
    produce_timestamp_us: int
    received_us: int


class ConsumerCell:
    """Last message applied for one connection.

    The snapshot is replaced as a whole, so readers on another thread see
    either the old or the new message, never a mix.
    """

    def __init__(self, connection_id: int) -> None:
        self.connection_id = connection_id
        self.snapshot: LinkSnapshot | None = None
        self.stale_dropped = 0
        self.applied = 0

    def offer(self, msg: LinkMessage, now_us: int) -> bool:
        if msg.connection_id != self.connection_id:
            return False
        snap = self.snapshot
        if snap is not None and msg.sequence <= snap.sequence:
            self.stale_dropped += 1
            return False
        self.snapshot = LinkSnapshot(msg.value_bits, msg.sequence, msg.produce_timestamp_us, now_us)
        self.applied += 1
        return True


@dataclass
class ProducerState:
    link: TagLink
    tag: str
    targets: list[Address]
    sequence: int = 0
    last_emit_us: int | None = None
    timer: object = None


NodeRef = tuple[object, str]


@dataclass
class TagLink:
    connection_id: int
    producer: NodeRef
    consumers: list[NodeRef]
    rpi_us: int = 1000


@dataclass
class LinkHandle:
    link: TagLink
    cells: list[tuple[object, ConsumerCell]] = field(default_factory=list)

    def read(self, consumer: int = 0) -> tuple[float, int]:
        return linked_read(self, consumer)


class LinkNode:
    """PC-side tag server taking part in tag data links.

    Output tags are produced every RPI to their consumers; input tags are
    refreshed whenever a newer message for their connection arrives.
    """

    def __init__(self, net, tags: Iterable[Tag], *, address: Address | None = None) -> None:
        self.net = net
        self.runtime = net.runtime
        self.tags: dict[str, Tag] = {}
        for tag in tags:
            if tag.name in self.tags:
                raise ConfigurationError(f"duplicate tag {tag.name!r}")
            self.tags[tag.name] = tag
        self._bits = {name: float_to_bits(t.value) for name, t in self.tags.items()}
        self._producers: dict[int, ProducerState] = {}
        self._consumers: dict[int, tuple[ConsumerCell, str]] = {}
        host = "127.0.0.1" if self.runtime.mode == "loopback" else "pc"
        self.endpoint = net.open(address or (host, 0), self._on_datagram)
        self.misrouted = 0
        self.last_latency_us: int | None = None

    # link-host interface shared with the emulator
    @property
    def link_address(self) -> Address:
        return self.endpoint.address

    def tag_direction(self, name: str) -> Direction | None:
        tag = self.tags.get(name)
        return tag.direction if tag else None

    def has_connection(self, connection_id: int) -> bool:
        return connection_id in self._producers or connection_id in self._consumers

    def attach_producer(self, state: ProducerState) -> None:
        self._producers[state.link.connection_id] = state
        start = self.runtime.now_us()
        self._schedule_production(state, start + state.link.rpi_us)

    def attach_consumer(self, link: TagLink, tag: str) -> ConsumerCell:
        cell = ConsumerCell(link.connection_id)
        self._consumers[link.connection_id] = (cell, tag)
        return cell

    def _schedule_production(self, state: ProducerState, at_us: int) -> None:
        def fire() -> None:
            if state.link.connection_id not in self._producers:
                return
            self._produce(state)
            self._schedule_production(state, at_us + state.link.rpi_us)

        state.timer = self.runtime.call_at(at_us, fire)

    def _produce(self, state: ProducerState) -> None:
        now = self.runtime.now_us()
        state.sequence = (state.sequence + 1) & 0xFFFF_FFFF
        state.last_emit_us = now
        msg = LinkMessage(state.link.connection_id, state.sequence, self._bits[state.tag], now)
        data = msg.encode()
        for target in state.targets:
            self.endpoint.send(data, target)

    def _on_datagram(self, data: bytes, src: Address) -> None:
        try:
            msg = LinkMessage.decode(data)
        except DecodeError:
            self.misrouted += 1
            return
        entry = self._consumers.get(msg.connection_id)
        if entry is None:
            self.misrouted += 1
            return
        cell, tag_name = entry
        now = self.runtime.now_us()
        if cell.offer(msg, now):
            self._bits[tag_name] = msg.value_bits
            tag = self.tags[tag_name]
            tag.value = msg.value
            tag.last_update = now

    def set(self, name: str, value: float) -> None:
        """Write a local tag; output tags go out with the next production."""
        if name not in self.tags:
            raise TagNameError(STATUS_UNKNOWN_TAG, f"unknown tag {name!r}")
        with self.runtime.locked():
            self._bits[name] = float_to_bits(value)
            self.tags[name].value = value
            self.tags[name].last_update = self.runtime.now_us()

    def get(self, name: str) -> float:
        if name not in self.tags:
            raise TagNameError(STATUS_UNKNOWN_TAG, f"unknown tag {name!r}")
        return bits_to_float(self._bits[name])

    def get_bits(self, name: str) -> int:
        return self._bits[name]

    def stop_producing(self) -> None:
        for state in self._producers.values():
            if state.timer is not None:
                state.timer.cancel()
        self._producers.clear()

    def close(self) -> None:
        self.stop_producing()
        self.endpoint.close()


def create_link(config: TagLink) -> LinkHandle:
    """Wire a producer tag to one or more consumer tags.

    Nodes are :class:`LinkNode` instances or the PLC emulator; anything with
    the link-host interface works.
    """
    if config.rpi_us <= 0:
        raise ConfigurationError("rpi must be positive")
    if not 0 <= config.connection_id <= 0xFFFF_FFFF:
        raise ConfigurationError("connection id must fit in 32 bits")
    if not config.consumers:
        raise ConfigurationError("a link needs at least one consumer")
    nodes = [config.producer[0]] + [node for node, _ in config.consumers]
    for node in nodes:
        if node.has_connection(config.connection_id):
            raise ConfigurationError(f"duplicate connection id {config.connection_id}")
    pnode, ptag = config.producer
    if pnode.tag_direction(ptag) is not Direction.OUTPUT:
        raise ConfigurationError(f"producer tag {ptag!r} must be output-published")
    for cnode, ctag in config.consumers:
        if cnode.tag_direction(ctag) is not Direction.INPUT:
            raise ConfigurationError(f"consumer tag {ctag!r} must be input-published")
    handle = LinkHandle(config)
    for cnode, ctag in config.consumers:
        handle.cells.append((cnode, cnode.attach_consumer(config, ctag)))
    targets = [cnode.link_address for cnode, _ in config.consumers]
    pnode.attach_producer(ProducerState(config, ptag, targets))
    return handle


def linked_read(handle: LinkHandle, consumer: int = 0) -> tuple[float, int]:
    """Consumer's local copy and its staleness in microseconds; never blocks."""
    node, cell = handle.cells[consumer]
    snap = cell.snapshot
    if snap is None:
        raise NotReadyError(f"connection {cell.connection_id} has not received data yet")
    return bits_to_float(snap.value_bits), node.runtime.now_us() - snap.produce_timestamp_us


def linked_cycle(
    node: LinkNode,
    value: float,
    *,
    produce_tag: str = "COut",
    consume_tag: str = "CIn",
    timeout_us: int = DEFAULT_TIMEOUT_US,
) -> float:
    """Put ``value`` in the local producer tag, wait until it comes back.

    ``value`` should be a nonce not currently present in the consumer tag;
    completion is detected by exact bit equality. The cycle latency ends up
    in ``node.last_latency_us``.
    """
    target = float_to_bits(value)
    t0 = node.runtime.now_us()
    node.set(produce_tag, value)
    if not node.runtime.wait_for(lambda: node.get_bits(consume_tag) == target, timeout_us):
        raise ProtocolTimeout(f"value did not return through the links within {timeout_us} us")
    node.last_latency_us = node.runtime.now_us() - t0
    return node.get(consume_tag)


class RemoteNode:
    """A link peer living in another process; only its address is known.

    Tag directions are taken on trust from the link configuration.
    """

    def __init__(self, runtime, address: Address, directions: dict[str, Direction] | None = None) -> None:
        self.runtime = runtime
        self.link_address = address
        self.directions = dict(directions or {})
        self._connections: set[int] = set()

    def tag_direction(self, name: str) -> Direction | None:
        return self.directions.get(name)

    def has_connection(self, connection_id: int) -> bool:
        return connection_id in self._connections

    def attach_producer(self, state: ProducerState) -> None:
        self._connections.add(state.link.connection_id)

    def attach_consumer(self, link: TagLink, tag: str) -> ConsumerCell:
        self._connections.add(link.connection_id)
        return ConsumerCell(link.connection_id)
