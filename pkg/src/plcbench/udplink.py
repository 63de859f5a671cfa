"""Raw UDP value exchange with the emulator's two-rung echo endpoint.

Every datagram is exactly one big-endian LREAL (8 bytes). The PLC side
stores a received value into its input variable and sends the same datagram
back one scan later. One reserved NaN pattern, :data:`QUERY_BITS`, asks for
the current output variable instead; it is the only payload that is not
echoed verbatim.

Measurement convention: ``read`` is a solicited query of the output
variable, ``write`` is fire-and-confirm (send a value, wait for its echo),
``cycle`` is send-and-echo. :meth:`UdpClient.send` on its own records only
the local send time.
"""

from __future__ import annotations

import struct
import time

from .errors import FormatError, ProtocolTimeout, RemoteError
from .lreal import bits_to_float, float_to_bits
from .net import Address

PAYLOAD_SIZE = 8
DEFAULT_PORT = 9601
DEFAULT_TIMEOUT_US = 500_000

# Signalling NaN with "READ" in the low bytes.
QUERY_BITS = 0x7FF0_0000_5245_4144


def encode_value(value: float) -> bytes:
    return struct.pack(">d", value)


def encode_bits(bits: int) -> bytes:
    return struct.pack(">Q", bits)


def decode_bits(data: bytes) -> int:
    if len(data) != PAYLOAD_SIZE:
        raise FormatError("bad payload length", min(len(data), PAYLOAD_SIZE), f"{len(data)} bytes, need 8")
    return struct.unpack(">Q", data)[0]


def decode_value(data: bytes) -> float:
    return bits_to_float(decode_bits(data))


class UdpClient:
    """Synchronous client: at most one datagram outstanding at a time."""

    def __init__(self, net, server: Address, *, local: Address | None = None, timeout_us: int = DEFAULT_TIMEOUT_US) -> None:
        self.runtime = net.runtime
        self.server = server
        self.timeout_us = timeout_us
        self._inbox: list[bytes] = []
        self.last_latency_us: int | None = None
        host = "127.0.0.1" if self.runtime.mode == "loopback" else "pc"
        self.endpoint = net.open(local or (host, 0), self._on_datagram)

    def close(self) -> None:
        self.endpoint.close()

    def _on_datagram(self, data: bytes, src: Address) -> None:
        self._inbox.append(data)

    def _flush(self) -> None:
        with self.runtime.locked():
            self._inbox.clear()

    def send(self, value: float) -> None:
        self._send_bits(float_to_bits(value))

    def _send_bits(self, bits: int) -> None:
        if self.runtime.mode == "loopback":
            t0 = time.monotonic_ns()
            self.endpoint.send(encode_bits(bits), self.server)
            self.last_latency_us = (time.monotonic_ns() - t0) // 1000
        else:
            self.endpoint.send(encode_bits(bits), self.server)
            self.last_latency_us = 0

    def recv_bits(self, timeout_us: int | None = None) -> int:
        timeout = self.timeout_us if timeout_us is None else timeout_us
        if not self.runtime.wait_for(lambda: bool(self._inbox), timeout):
            raise ProtocolTimeout(f"no datagram within {timeout} us")
        with self.runtime.locked():
            data = self._inbox.pop(0)
        return decode_bits(data)

    def recv(self, timeout_us: int | None = None) -> float:
        return bits_to_float(self.recv_bits(timeout_us))

    def cycle(self, value: float) -> float:
        bits = float_to_bits(value)
        if bits == QUERY_BITS:
            raise ValueError("the query pattern cannot be echoed")
        self._flush()
        t0 = self.runtime.now_us()
        self._send_bits(bits)
        result = self.recv_bits()
        self.last_latency_us = self.runtime.now_us() - t0
        return bits_to_float(result)

    def read(self) -> float:
        self._flush()
        t0 = self.runtime.now_us()
        self._send_bits(QUERY_BITS)
        result = self.recv()
        self.last_latency_us = self.runtime.now_us() - t0
        return result

    def write(self, value: float) -> None:
        bits = float_to_bits(value)
        echoed = float_to_bits(self.cycle(value))
        if echoed != bits:
            raise RemoteError(0, f"echo mismatch: sent {bits:016X}, got {echoed:016X}")
