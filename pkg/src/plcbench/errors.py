"""Exception hierarchy shared by the emulator, the protocol clients and the bench."""

from __future__ import annotations


class PlcBenchError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(PlcBenchError, ValueError):
    """Invalid variable table, scan configuration, link or config file."""


class StartupError(PlcBenchError):
    """An endpoint could not be bound."""


class UnsupportedModeError(PlcBenchError):
    """The operation does not exist in the current execution mode."""


class EncodeError(PlcBenchError, ValueError):
    pass


class DecodeError(PlcBenchError, ValueError):
    """A frame could not be decoded.

    ``kind`` is one of a small fixed vocabulary (``"truncated header"``,
    ``"unsupported command"``, ...) so callers can classify failures;
    ``offset`` is the byte position where decoding gave up.
    """

    def __init__(self, kind: str, offset: int, detail: str = "") -> None:
        self.kind = kind
        self.offset = offset
        self.detail = detail
        msg = f"{kind} at offset {offset}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class FormatError(DecodeError):
    """Raw datagram of the wrong size."""


class ProtocolTimeout(PlcBenchError, TimeoutError):
    pass


class RemoteError(PlcBenchError):
    """The server answered with a non-success status."""

    def __init__(self, code: int, message: str = "") -> None:
        self.code = code
        super().__init__(message or f"remote error 0x{code:04X}")


class TagNameError(RemoteError, LookupError):
    pass


class DirectionError(RemoteError):
    pass


class NotReadyError(PlcBenchError):
    """A linked tag has not received any message yet."""


class QualityError(PlcBenchError):
    """A gateway item is not of Good quality after refresh."""


class ConnectionFailed(PlcBenchError, ConnectionError):
    pass


class EmptyInputError(PlcBenchError, ValueError):
    pass


class RunAborted(PlcBenchError):
    """Too many failed trials; ``samples`` holds what was collected so far."""

    def __init__(self, message: str, samples: list | None = None) -> None:
        self.samples = samples or []
        super().__init__(message)
