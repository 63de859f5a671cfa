"""Binary FINS over UDP: memory-area read (0x0101) and write (0x0102).

Frame layout, all integers big-endian::

    ICF RSV GCT DNA DA1 DA2 SNA SA1 SA2 SID | MRC SRC | body

Read request body:  area(1) address(2) bit(1) count(2)
Write request body: area(1) address(2) bit(1) count(2) words(2*count)
Response body:      end_code(2) [words]

Bit 6 of ICF distinguishes responses from commands.
"""

from __future__ import annotations

import struct
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from typing import Union

from .errors import DecodeError, EncodeError, ProtocolTimeout, RemoteError
from .net import Address
from .lreal import WORDS_PER_LREAL, bits_to_float, bits_to_words, float_to_bits, words_to_bits

MEMORY_AREA_READ = 0x0101
MEMORY_AREA_WRITE = 0x0102
SUPPORTED_COMMANDS = (MEMORY_AREA_READ, MEMORY_AREA_WRITE)

AREA_DM = 0x82

ICF_COMMAND = 0x80
ICF_RESPONSE_BIT = 0x40
DEFAULT_GCT = 0x02

END_OK = 0x0000
END_UNDEFINED_COMMAND = 0x0401
END_COMMAND_TOO_LONG = 0x1001
END_COMMAND_TOO_SHORT = 0x1002
END_ELEMENTS_MISMATCH = 0x1003
END_AREA_MISSING = 0x1101
END_ADDRESS_RANGE = 0x1103

HEADER_LEN = 10
_HEADER = struct.Struct(">10B")
_BODY = struct.Struct(">BHBH")

DEFAULT_TIMEOUT_US = 500_000


@dataclass(frozen=True)
class FinsHeader:
    icf: int = ICF_COMMAND
    rsv: int = 0
    gct: int = DEFAULT_GCT
    dna: int = 0
    da1: int = 0x01
    da2: int = 0
    sna: int = 0
    sa1: int = 0x02
    sa2: int = 0
    sid: int = 0

    @property
    def is_response(self) -> bool:
        return bool(self.icf & ICF_RESPONSE_BIT)

    def reply(self) -> FinsHeader:
        """Header for the response to this command: addresses swapped, same sid."""
        return FinsHeader(
            icf=(self.icf | ICF_RESPONSE_BIT) & ~0x01 & 0xFF,
            rsv=self.rsv,
            gct=self.gct,
            dna=self.sna,
            da1=self.sa1,
            da2=self.sa2,
            sna=self.dna,
            sa1=self.da1,
            sa2=self.da2,
            sid=self.sid,
        )

    def pack(self) -> bytes:
        return _HEADER.pack(
            self.icf, self.rsv, self.gct, self.dna, self.da1, self.da2,
            self.sna, self.sa1, self.sa2, self.sid,
        )


@dataclass(frozen=True)
class MemoryAreaRead:
    area_code: int
    address: int
    bit: int = 0
    count: int = 1

    code = MEMORY_AREA_READ


@dataclass(frozen=True)
class MemoryAreaWrite:
    area_code: int
    address: int
    bit: int = 0
    count: int = 0
    words: tuple[int, ...] = ()

    code = MEMORY_AREA_WRITE


Command = Union[MemoryAreaRead, MemoryAreaWrite]


@dataclass(frozen=True)
class FinsRequest:
    header: FinsHeader
    command: Command


@dataclass(frozen=True)
class FinsResponse:
    header: FinsHeader
    command_code: int
    end_code: int = END_OK
    payload: tuple[int, ...] = field(default=())


Frame = Union[FinsRequest, FinsResponse]


def _check_u8(name: str, value: int) -> None:
    if not 0 <= value <= 0xFF:
        raise EncodeError(f"{name}={value} does not fit in 8 bits")


def _check_u16(name: str, value: int) -> None:
    if not 0 <= value <= 0xFFFF:
        raise EncodeError(f"{name}={value} does not fit in 16 bits")


def encode_frame(frame: Frame) -> bytes:
    h = frame.header
    for name in ("icf", "rsv", "gct", "dna", "da1", "da2", "sna", "sa1", "sa2", "sid"):
        _check_u8(name, getattr(h, name))
    if isinstance(frame, FinsRequest):
        if h.is_response:
            raise EncodeError("request header has the response bit set")
        cmd = frame.command
        _check_u8("area_code", cmd.area_code)
        _check_u16("address", cmd.address)
        _check_u8("bit", cmd.bit)
        _check_u16("count", cmd.count)
        if cmd.bit != 0:
            raise EncodeError("only word access (bit=0) is supported")
        if cmd.count < 1:
            raise EncodeError("count must be at least 1")
        out = h.pack() + struct.pack(">H", cmd.code) + _BODY.pack(cmd.area_code, cmd.address, cmd.bit, cmd.count)
        if isinstance(cmd, MemoryAreaWrite):
            if len(cmd.words) != cmd.count:
                raise EncodeError(f"write count {cmd.count} but {len(cmd.words)} words supplied")
            for w in cmd.words:
                _check_u16("word", w)
            out += struct.pack(f">{len(cmd.words)}H", *cmd.words)
        return out
    if isinstance(frame, FinsResponse):
        if not h.is_response:
            raise EncodeError("response header lacks the response bit")
        if frame.command_code not in SUPPORTED_COMMANDS:
            raise EncodeError(f"unsupported command 0x{frame.command_code:04X}")
        _check_u16("end_code", frame.end_code)
        if frame.end_code != END_OK and frame.payload:
            raise EncodeError("error responses carry no payload")
        if frame.command_code == MEMORY_AREA_WRITE and frame.payload:
            raise EncodeError("write responses carry no payload")
        for w in frame.payload:
            _check_u16("word", w)
        return (
            h.pack()
            + struct.pack(">HH", frame.command_code, frame.end_code)
            + struct.pack(f">{len(frame.payload)}H", *frame.payload)
        )
    raise EncodeError(f"not a FINS frame: {type(frame).__name__}")


def decode_frame(data: bytes) -> Frame:
    if len(data) < HEADER_LEN:
        raise DecodeError("truncated header", len(data))
    header = FinsHeader(*_HEADER.unpack_from(data))
    if len(data) < HEADER_LEN + 2:
        raise DecodeError("truncated command code", len(data))
    (code,) = struct.unpack_from(">H", data, HEADER_LEN)
    if code not in SUPPORTED_COMMANDS:
        raise DecodeError("unsupported command", HEADER_LEN, f"0x{code:04X}")
    pos = HEADER_LEN + 2

    if header.is_response:
        if len(data) < pos + 2:
            raise DecodeError("truncated body", len(data))
        (end_code,) = struct.unpack_from(">H", data, pos)
        pos += 2
        rest = len(data) - pos
        if rest % 2:
            raise DecodeError("odd payload length", len(data) - 1)
        if rest and end_code != END_OK:
            raise DecodeError("trailing bytes", pos, "error response with payload")
        if rest and code == MEMORY_AREA_WRITE:
            raise DecodeError("trailing bytes", pos, "write response with payload")
        payload = struct.unpack_from(f">{rest // 2}H", data, pos)
        return FinsResponse(header, code, end_code, tuple(payload))

    if len(data) < pos + _BODY.size:
        raise DecodeError("truncated body", len(data))
    area, address, bit, count = _BODY.unpack_from(data, pos)
    if bit != 0:
        raise DecodeError("invalid field", pos + 3, "bit access is not supported")
    if count < 1:
        raise DecodeError("invalid field", pos + 4, "count must be at least 1")
    pos += _BODY.size
    if code == MEMORY_AREA_READ:
        if len(data) != pos:
            raise DecodeError("trailing bytes", pos)
        return FinsRequest(header, MemoryAreaRead(area, address, bit, count))
    need = pos + 2 * count
    if len(data) < need:
        raise DecodeError("truncated body", len(data), f"expected {count} words")
    if len(data) > need:
        raise DecodeError("trailing bytes", need)
    words = struct.unpack_from(f">{count}H", data, pos)
    return FinsRequest(header, MemoryAreaWrite(area, address, bit, count, tuple(words)))


def error_response_bytes(data: bytes, end_code: int) -> bytes | None:
    """Best-effort error reply to a malformed command; None if unanswerable."""
    if len(data) < HEADER_LEN + 2:
        return None
    header = FinsHeader(*_HEADER.unpack_from(data))
    if header.is_response:
        return None
    (code,) = struct.unpack_from(">H", data, HEADER_LEN)
    return header.reply().pack() + struct.pack(">HH", code, end_code)


def float_words(value: float) -> tuple[int, ...]:
    return tuple(bits_to_words(float_to_bits(value)))


def words_float(words: tuple[int, ...] | list[int]) -> float:
    return bits_to_float(words_to_bits(words))


class SidAllocator:
    """Service ids 1..255 in rotation; 0 is never issued."""

    def __init__(self) -> None:
        self._next = 1

    def allocate(self, in_use: Callable[[int], bool]) -> int:
        for _ in range(255):
            sid = self._next
            self._next = sid % 255 + 1
            if not in_use(sid):
                return sid
        raise RuntimeError("255 FINS requests already outstanding")


class FinsClient:
    """FINS command client with sid-correlated responses.

    Several requests may be outstanding at once; responses are matched to
    requests by sid only, never by arrival order. Responses for sids nobody
    waits for any more are dropped.
    """

    def __init__(
        self,
        net,
        server: Address,
        *,
        local: Address | None = None,
        timeout_us: int = DEFAULT_TIMEOUT_US,
        header: FinsHeader | None = None,
    ) -> None:
        self.runtime = net.runtime
        self.server = server
        self.timeout_us = timeout_us
        self.header = header or FinsHeader()
        self._sids = SidAllocator()
        self._outstanding: dict[int, int] = {}  # sid -> command code
        self._responses: dict[int, FinsResponse] = {}
        self.unmatched = 0
        self.last_latency_us: int | None = None
        host = "127.0.0.1" if self.runtime.mode == "loopback" else "pc"
        self.endpoint = net.open(local or (host, 0), self._on_datagram)

    def close(self) -> None:
        self.endpoint.close()

    def _on_datagram(self, data: bytes, src: Address) -> None:
        try:
            frame = decode_frame(data)
        except DecodeError:
            self.unmatched += 1
            return
        if not isinstance(frame, FinsResponse):
            self.unmatched += 1
            return
        sid = frame.header.sid
        if self._outstanding.get(sid) != frame.command_code:
            self.unmatched += 1
            return
        del self._outstanding[sid]
        self._responses[sid] = frame

    def submit(self, command: Command) -> int:
        """Send one command without waiting; returns its sid."""
        with self.runtime.locked():
            sid = self._sids.allocate(lambda s: s in self._outstanding)
            self._outstanding[sid] = command.code
            self._responses.pop(sid, None)
        frame = FinsRequest(replace(self.header, sid=sid), command)
        self.endpoint.send(encode_frame(frame), self.server)
        return sid

    def collect(self, sid: int, timeout_us: int | None = None) -> FinsResponse:
        timeout = self.timeout_us if timeout_us is None else timeout_us
        if not self.runtime.wait_for(lambda: sid in self._responses, timeout):
            with self.runtime.locked():
                self._outstanding.pop(sid, None)
            raise ProtocolTimeout(f"no FINS response for sid {sid} within {timeout} us")
        with self.runtime.locked():
            return self._responses.pop(sid)

    def discard(self, sid: int) -> None:
        """Stop waiting for a response; it is dropped if it arrives later."""
        with self.runtime.locked():
            self._outstanding.pop(sid, None)
            self._responses.pop(sid, None)

    def read_words(self, address: int, count: int, *, area: int = AREA_DM) -> tuple[int, ...]:
        t0 = self.runtime.now_us()
        sid = self.submit(MemoryAreaRead(area, address, 0, count))
        resp = self.collect(sid)
        if resp.end_code != END_OK:
            raise RemoteError(resp.end_code)
        if len(resp.payload) != count:
            raise RemoteError(resp.end_code, f"expected {count} words, got {len(resp.payload)}")
        self.last_latency_us = self.runtime.now_us() - t0
        return resp.payload

    def write_words(self, address: int, words: tuple[int, ...] | list[int], *, area: int = AREA_DM) -> None:
        t0 = self.runtime.now_us()
        sid = self.submit(MemoryAreaWrite(area, address, 0, len(words), tuple(words)))
        resp = self.collect(sid)
        if resp.end_code != END_OK:
            raise RemoteError(resp.end_code)
        self.last_latency_us = self.runtime.now_us() - t0

    def read(self, dm_address: int) -> float:
        return words_float(self.read_words(dm_address, WORDS_PER_LREAL))

    def write(self, dm_address: int, value: float) -> None:
        self.write_words(dm_address, float_words(value))

    def cycle_sync(self, write_address: int, read_address: int, value: float) -> float:
        """Write, wait for its response, then read."""
        t0 = self.runtime.now_us()
        self.write(write_address, value)
        result = self.read(read_address)
        self.last_latency_us = self.runtime.now_us() - t0
        return result

    def cycle_pipelined(self, write_address: int, read_address: int, value: float) -> float:
        """Send write and read back to back; ignore the write's response."""
        t0 = self.runtime.now_us()
        wsid = self.submit(MemoryAreaWrite(AREA_DM, write_address, 0, WORDS_PER_LREAL, float_words(value)))
        rsid = self.submit(MemoryAreaRead(AREA_DM, read_address, 0, WORDS_PER_LREAL))
        self.discard(wsid)
        resp = self.collect(rsid)
        if resp.end_code != END_OK:
            raise RemoteError(resp.end_code)
        result = words_float(resp.payload)
        self.last_latency_us = self.runtime.now_us() - t0
        return result
